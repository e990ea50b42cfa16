use serde::{Deserialize, Serialize};

use super::Outcome;
use crate::error::{Error, Result};

/// Likelihood criterion for the multivariate mixed model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    #[default]
    Ml,
    Reml,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Max-norm gradient tolerance for the variance components of the logistic mixed model (deviance scale).
    pub glmm_gradient: f64,
    /// Max-norm gradient tolerance for the multivariate mixed model (log-likelihood scale).
    pub mixed_gradient: f64,
    pub max_iterations: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            glmm_gradient: 1e-3,
            mixed_gradient: 1e-4,
            max_iterations: 500,
        }
    }
}

/// Study window, outcome set and run controls. Serialized as the CLI config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub pre_years: Vec<i32>,
    pub post_years: Vec<i32>,
    pub reference_year: i32,
    pub outcomes: Vec<Outcome>,
    pub bootstrap_replicates: usize,
    pub seed: u64,
    pub tolerances: Tolerances,
    /// Adds TECHNOLOGY, TEACHING and SPECIALISED to the risk-adjustment model.
    pub ward_level_covariates: bool,
    /// Weights panel cells by their patient counts in the second stage.
    pub weighted_cells: bool,
    pub criterion: Criterion,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            pre_years: vec![2010, 2011],
            post_years: vec![2012, 2013],
            reference_year: 2010,
            outcomes: Outcome::ALL.to_vec(),
            bootstrap_replicates: 200,
            seed: 2012,
            tolerances: Tolerances::default(),
            ward_level_covariates: false,
            weighted_cells: false,
            criterion: Criterion::Ml,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pre_years.is_empty() || self.post_years.is_empty() {
            return Err(Error::Config("pre_years and post_years must be non-empty".into()));
        }
        if let Some(y) = self.pre_years.iter().find(|y| self.post_years.contains(y)) {
            return Err(Error::Config(format!("year {y} is both pre and post policy")));
        }
        if !self.pre_years.contains(&self.reference_year) {
            return Err(Error::Config(format!(
                "reference year {} is not a pre-policy year",
                self.reference_year
            )));
        }
        if self.outcomes.is_empty() {
            return Err(Error::Config("outcome set is empty".into()));
        }
        let mut sorted = self.outcomes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.outcomes.len() {
            return Err(Error::Config("outcome set has duplicates".into()));
        }
        Ok(())
    }

    /// All study years in increasing order.
    pub fn years(&self) -> Vec<i32> {
        let mut y: Vec<i32> = self.pre_years.iter().chain(&self.post_years).copied().collect();
        y.sort_unstable();
        y.dedup();
        y
    }

    pub fn first_year(&self) -> i32 {
        self.years()[0]
    }

    pub fn contains_year(&self, year: i32) -> bool {
        self.pre_years.contains(&year) || self.post_years.contains(&year)
    }

    pub fn is_post(&self, year: i32) -> bool {
        self.post_years.contains(&year)
    }

    /// Last pre-policy year: the baseline of DID reductions.
    pub fn last_pre_year(&self) -> i32 {
        *self.pre_years.iter().max().expect("validated config")
    }

    /// Pre-policy years other than the reference: the parallel-trend coefficients.
    pub fn placebo_years(&self) -> Vec<i32> {
        let mut y: Vec<i32> = self
            .pre_years
            .iter()
            .copied()
            .filter(|&y| y != self.reference_year)
            .collect();
        y.sort_unstable();
        y
    }

    /// 1-based month counter from the first study year.
    pub fn month_index(&self, year: i32, month: u8) -> u32 {
        (12 * (year - self.first_year()) + i32::from(month)) as u32
    }

    /// Outcomes in reporting order.
    pub fn ordered_outcomes(&self) -> Vec<Outcome> {
        let mut o = self.outcomes.clone();
        o.sort();
        o
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let c: StudyConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_matches_study_design() {
        let c = StudyConfig::default();
        c.validate().unwrap();
        assert_eq!(c.years(), vec![2010, 2011, 2012, 2013]);
        assert_eq!(c.month_index(2010, 1), 1);
        assert_eq!(c.month_index(2013, 12), 48);
        assert_eq!(c.placebo_years(), vec![2011]);
        assert_eq!(c.last_pre_year(), 2011);
    }

    #[test]
    fn reference_must_be_pre() {
        let c = StudyConfig {
            reference_year: 2012,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn overlapping_periods_rejected() {
        let c = StudyConfig {
            post_years: vec![2011, 2012],
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = StudyConfig::from_json_str(r#"{"seed": 7, "outcomes": ["readmissions"]}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.outcomes, vec![Outcome::Readmissions]);
        assert_eq!(c.reference_year, 2010);
    }
}
