use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Outcome;
use crate::did::{
    build_design, fit_mixed_data, fit_mixed_data_from, reported_terms, reported_values, DidDesign, InteractionScheme, MixedData,
    MixedOptions, MultivariateMixedFit,
};
use crate::error::{Error, Result};
use crate::riskadjust::PanelDataset;

pub const MIN_REPLICATES: usize = 100;
/// Largest failed-replicate share of a valid result.
pub const MAX_FAILED_SHARE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapTerm {
    pub term: String,
    pub outcome: Outcome,
    pub estimate: f64,
    pub se: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapResult {
    pub scheme: InteractionScheme,
    pub outcomes: Vec<Outcome>,
    pub terms: Vec<BootstrapTerm>,
    pub replicates: usize,
    pub seed: u64,
    pub n_failed: usize,
    pub valid: bool,
}

impl BootstrapResult {
    pub fn get(&self, term: &str, outcome: Outcome) -> Option<&BootstrapTerm> {
        self.terms.iter().find(|t| t.term == term && t.outcome == outcome)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["term", "outcome", "estimate", "se", "p", "ci_low", "ci_high"])?;
        for t in &self.terms {
            out.write_record([
                t.term.clone(),
                t.outcome.label().to_string(),
                t.estimate.to_string(),
                t.se.to_string(),
                t.p_value.to_string(),
                t.ci_low.to_string(),
                t.ci_high.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("bootstrap csv", e))?;
        Ok(())
    }
}

/// Two-sided normal p-value of `estimate / se`. A zero SE gives 1 for a zero
/// estimate and 0 otherwise.
pub fn normal_p_value(estimate: f64, se: f64) -> f64 {
    if se == 0.0 {
        return if estimate == 0.0 { 1.0 } else { 0.0 };
    }
    let z = (estimate / se).abs();
    let n = Normal::standard();
    (2.0 * n.sf(z)).clamp(0.0, 1.0)
}

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Hospital index sets for every replicate, drawn sequentially from the seed.
pub fn resampling_indices(n_hospitals: usize, replicates: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..replicates)
        .map(|_| (0..n_hospitals).map(|_| rng.random_range(0..n_hospitals)).collect())
        .collect()
}

/// Hospital-level cases bootstrap of the reported fixed-effect terms.
pub fn cluster_bootstrap(
    panel: &PanelDataset,
    scheme: InteractionScheme,
    replicates: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    let design = build_design(panel, scheme)?;
    let opts = MixedOptions::from_config(panel.config());
    let data = MixedData::from_design(&design)?;
    let fit = MultivariateMixedFit::from_estimate(&design, &fit_mixed_data(&data, &opts, None)?, opts.criterion);
    cluster_bootstrap_fit(&design, &fit, &opts, replicates, seed)
}

/// Bootstrap around an existing fit; replicates warm-start from its variance
/// parameters. Results do not depend on the rayon pool size.
pub fn cluster_bootstrap_fit(
    design: &DidDesign,
    fit: &MultivariateMixedFit,
    opts: &MixedOptions,
    replicates: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if replicates < MIN_REPLICATES {
        return Err(Error::Config(format!(
            "bootstrap needs at least {MIN_REPLICATES} replicates, got {replicates}"
        )));
    }
    let data = MixedData::from_design(design)?;
    let indices = resampling_indices(data.n_hospitals(), replicates, seed);
    let layout = &design.layout;
    let k = design.n_outcomes();
    let p = design.x.cols();
    let draws: Vec<Option<Vec<Vec<f64>>>> = indices
        .par_iter()
        .map(|idx| {
            let est = fit_mixed_data_from(&data.resample(idx), opts, Some(&fit.theta), Some(&fit.inverse_hessian)).ok()?;
            if !est.converged {
                return None;
            }
            let coefs: Vec<Vec<f64>> = (0..k).map(|kk| est.coefficients[kk * p..(kk + 1) * p].to_vec()).collect();
            Some(reported_values(layout, &coefs))
        })
        .collect();
    let n_failed = draws.iter().filter(|d| d.is_none()).count();
    let ok: Vec<&Vec<Vec<f64>>> = draws.iter().flatten().collect();
    let point = reported_values(layout, &fit.coefficients);
    let mut terms = Vec::new();
    for (t, term) in reported_terms(layout).into_iter().enumerate() {
        for (kk, &outcome) in design.outcomes.iter().enumerate() {
            let estimate = point[t][kk];
            let mut v: Vec<f64> = ok.iter().map(|d| d[t][kk]).collect();
            let (se, lo, hi) = if v.len() >= 2 {
                v.sort_by(f64::total_cmp);
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var.sqrt(), quantile_sorted(&v, 0.025), quantile_sorted(&v, 0.975))
            } else {
                (f64::NAN, f64::NAN, f64::NAN)
            };
            terms.push(BootstrapTerm {
                term: term.clone(),
                outcome,
                estimate,
                se,
                p_value: if se.is_nan() { f64::NAN } else { normal_p_value(estimate, se) },
                ci_low: lo,
                ci_high: hi,
            });
        }
    }
    Ok(BootstrapResult {
        scheme: design.scheme(),
        outcomes: design.outcomes.clone(),
        terms,
        replicates,
        seed,
        n_failed,
        valid: (n_failed as f64) <= MAX_FAILED_SHARE * replicates as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::did::design::tests::small_panel;

    #[test]
    fn p_values_and_quantiles() {
        assert!((normal_p_value(1.959963984540054, 1.0) - 0.05).abs() < 1e-9);
        assert_eq!(normal_p_value(0.0, 0.0), 1.0);
        assert_eq!(normal_p_value(0.1, 0.0), 0.0);
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.5), 2.5);
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert!((quantile_sorted(&v, 0.025) - 1.075).abs() < 1e-12);
    }

    #[test]
    fn too_few_replicates_is_a_config_error() {
        let err = cluster_bootstrap(&small_panel(), InteractionScheme::Base, 50, 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn identical_hospitals_give_zero_se() {
        // every hospital of small_panel carries the same cells up to ownership
        let boot = cluster_bootstrap(&small_panel(), InteractionScheme::Base, 100, 9).unwrap();
        assert!(boot.valid, "failed {}", boot.n_failed);
        for t in &boot.terms {
            assert!(t.se.abs() < 1e-9, "{} {:?} se {}", t.term, t.outcome, t.se);
            assert!(t.ci_low <= t.ci_high + 1e-12);
        }
    }

    #[test]
    fn indices_are_reproducible() {
        assert_eq!(resampling_indices(10, 5, 3), resampling_indices(10, 5, 3));
        assert_ne!(resampling_indices(10, 5, 3), resampling_indices(10, 5, 4));
    }
}
