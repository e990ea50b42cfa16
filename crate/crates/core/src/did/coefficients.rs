use serde::Serialize;

use super::design::{did_column, level_did_column, year_column, DesignLayout, InteractionScheme, INTERCEPT, MONTH, TREATED};
use super::mixed::MultivariateMixedFit;
use crate::data::Outcome;
use crate::error::{Error, Result};

/// One row of DID estimates across outcomes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DidRow {
    pub term: String,
    pub year: i32,
    /// `None` for the base TREATED x YEAR block, the level name otherwise.
    pub level: Option<String>,
    pub estimates: Vec<f64>,
}

/// TREATED x YEAR block of a fit, plus the level-specific triple interactions
/// for the extended schemes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DidCoefficients {
    pub scheme: InteractionScheme,
    pub outcomes: Vec<Outcome>,
    pub delta: Vec<DidRow>,
    pub tau: Vec<DidRow>,
}

impl DidCoefficients {
    pub fn delta(&self, year: i32, outcome: Outcome) -> Option<f64> {
        let k = self.outcomes.iter().position(|&o| o == outcome)?;
        self.delta.iter().find(|r| r.year == year).map(|r| r.estimates[k])
    }

    /// Triple interaction of `level` in `year`. Base-scheme fits have none.
    pub fn tau(&self, level: &str, year: i32, outcome: Outcome) -> Result<Option<f64>> {
        if self.scheme == InteractionScheme::Base {
            return Err(Error::SchemeMismatch(format!(
                "tau coefficients requested from a {} scheme fit",
                self.scheme
            )));
        }
        if !self.scheme.levels().contains(&level) {
            return Err(Error::SchemeMismatch(format!(
                "level {level} is not part of the {} scheme",
                self.scheme
            )));
        }
        let Some(k) = self.outcomes.iter().position(|&o| o == outcome) else {
            return Ok(None);
        };
        Ok(self
            .tau
            .iter()
            .find(|r| r.year == year && r.level.as_deref() == Some(level))
            .map(|r| r.estimates[k]))
    }
}

pub fn extract_did_coefficients(fit: &MultivariateMixedFit) -> DidCoefficients {
    let col = |name: &str| fit.columns.iter().position(|c| c == name);
    let row = |term: String, year: i32, level: Option<String>| {
        let a = col(&term)?;
        Some(DidRow {
            estimates: fit.coefficients.iter().map(|b| b[a]).collect(),
            term,
            year,
            level,
        })
    };
    let years: Vec<i32> = fit
        .columns
        .iter()
        .filter_map(|c| c.strip_prefix("YEAR_").and_then(|y| y.parse().ok()))
        .collect();
    let delta = years.iter().filter_map(|&y| row(did_column(y), y, None)).collect();
    let tau = fit
        .scheme
        .levels()
        .iter()
        .flat_map(|l| years.iter().map(move |&y| (*l, y)))
        .filter_map(|(l, y)| row(level_did_column(l, y), y, Some(l.to_string())))
        .collect();
    DidCoefficients {
        scheme: fit.scheme,
        outcomes: fit.outcomes.clone(),
        delta,
        tau,
    }
}

/// Rows reported in the fixed-effects table, in display order. Year levels are
/// shown for every study year (the reference year's level is the intercept).
pub fn reported_terms(layout: &DesignLayout) -> Vec<String> {
    let mut terms = Vec::new();
    if layout.include_month {
        terms.push(MONTH.to_string());
    }
    terms.push(TREATED.to_string());
    terms.push(year_column(layout.reference_year));
    terms.extend(layout.years.iter().map(|&y| year_column(y)));
    terms.extend(layout.years.iter().map(|&y| did_column(y)));
    for level in layout.scheme.levels() {
        terms.push(level.to_string());
        terms.extend(layout.years.iter().map(|&y| format!("{level}:YEAR_{y}")));
        terms.push(format!("{level}:TREATED"));
        terms.extend(layout.years.iter().map(|&y| level_did_column(level, y)));
    }
    terms
}

/// Value of a reported term from one outcome's coefficient vector.
pub fn term_value(layout: &DesignLayout, coefficients: &[f64], term: &str) -> Option<f64> {
    let intercept = coefficients[layout.position(INTERCEPT)?];
    if term == year_column(layout.reference_year) {
        return Some(intercept);
    }
    if let Some(y) = term.strip_prefix("YEAR_").and_then(|y| y.parse::<i32>().ok()) {
        return Some(intercept + coefficients[layout.position(&year_column(y))?]);
    }
    layout.position(term).map(|a| coefficients[a])
}

/// `values[t][k]`: reported term `t` for outcome `k`.
pub fn reported_values(layout: &DesignLayout, coefficients: &[Vec<f64>]) -> Vec<Vec<f64>> {
    reported_terms(layout)
        .iter()
        .map(|t| {
            coefficients
                .iter()
                .map(|b| term_value(layout, b, t).expect("reported term is in the layout"))
                .collect()
        })
        .collect()
}
