//! Stage one: per-outcome logistic mixed models and the ward-month panel of
//! average predicted outcomes.

mod glmm;
mod panel;

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::{AdmissionDataset, Outcome};
use crate::error::{Error, Result};

pub use glmm::{
    fit_logistic_mixed, fit_logistic_mixed_with_variances, laplace_deviance, predict_probabilities, HospitalYear,
    LogisticMixedFit, LogisticMixedSpec, Predictions, WardYear,
};
pub use panel::{collapse_to_panel, PanelCell, PanelDataset, PANEL_COLUMNS};

/// Fits for every configured outcome plus the collapsed panel.
#[derive(Debug, Clone)]
pub struct RiskAdjustment {
    pub fits: BTreeMap<Outcome, LogisticMixedFit>,
    pub panel: PanelDataset,
    /// Records predicted without random effects, per outcome.
    pub unseen: BTreeMap<Outcome, usize>,
}

impl RiskAdjustment {
    pub fn converged(&self) -> bool {
        self.fits.values().all(|f| f.converged)
    }
}

/// Runs the configured outcome fits in parallel on the current rayon pool and
/// collapses their predictions. The first failing outcome's error is returned,
/// labelled with the outcome.
pub fn risk_adjust(ds: &AdmissionDataset) -> Result<RiskAdjustment> {
    let outcomes = ds.config().ordered_outcomes();
    let results: Vec<(Outcome, Result<LogisticMixedFit>)> = outcomes
        .par_iter()
        .map(|&o| (o, fit_logistic_mixed(ds, &LogisticMixedSpec::for_config(o, ds.config()))))
        .collect();
    let mut fits = BTreeMap::new();
    let mut probs = BTreeMap::new();
    let mut unseen = BTreeMap::new();
    for (o, r) in results {
        let fit = r.map_err(|e| match e {
            Error::Separation { index, value } => Error::Validation(format!(
                "{o}: separation in the risk-adjustment model (coefficient {index} = {value})"
            )),
            Error::Structure(m) => Error::Structure(format!("{o}: {m}")),
            other => other,
        })?;
        let pred = predict_probabilities(&fit, ds);
        unseen.insert(o, pred.unseen);
        probs.insert(o, pred.probabilities);
        fits.insert(o, fit);
    }
    let panel = collapse_to_panel(ds, &probs)?;
    Ok(RiskAdjustment { fits, panel, unseen })
}
