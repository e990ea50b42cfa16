use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: u64,
        column: String,
        message: String,
    },

    /// A dataset or panel violates a domain invariant.
    #[error("{0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("complete separation: coefficient {index} reached {value:.3} on the logit scale")]
    Separation { index: usize, value: f64 },

    #[error("model structure: {0}")]
    Structure(String),

    #[error("design has collinear columns: {}", columns.join(", "))]
    Collinear { columns: Vec<String> },

    #[error("scheme mismatch: {0}")]
    SchemeMismatch(String),

    #[error("line search failed: {0}")]
    LineSearch(String),

    #[error("residual cross-product matrix is rank deficient: {0}")]
    Rank(String),

    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of a numerical routine, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::Singular(_)
                | Error::Separation { .. }
                | Error::LineSearch(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
