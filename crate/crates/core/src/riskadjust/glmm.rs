//! Logistic GLMM with ward-year intercepts nested in hospital-year intercepts,
//! fit by Laplace approximation.
//!
//! Random effects use the spherical form `eta = X b + s_mu u_j + s_nu v_k` with
//! `u, v ~ N(0, I)`. For fixed `(s_mu, s_nu)` the posterior mode of `(b, u, v)`
//! is found by penalized Newton steps. The nesting makes the random-effect block
//! of the Hessian reducible by two diagonal Schur complements, so each step costs
//! one pass over the records plus a `p x p` solve.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{AdmissionDataset, AdmissionRecord, Covariate, Outcome, StudyConfig};
use crate::error::{Error, Result};
use crate::numerics::{
    bernoulli_loglik, central_difference_gradient_into, inv_logit, irls_fit, minimize, Cholesky, DenseMatrix, Objective, QuasiNewtonOptions,
    SEPARATION_BOUND,
};

/// Log-variance range explored by the outer optimizer.
const LOG_VARIANCE_BOUNDS: (f64, f64) = (-30.0, 10.0);
const START_LOG_VARIANCE: f64 = -std::f64::consts::LN_10; // ln 0.1

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WardYear {
    pub hospital_id: String,
    pub ward_id: String,
    pub year: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HospitalYear {
    pub hospital_id: String,
    pub year: i32,
}

/// Which outcome to model and with which covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticMixedSpec {
    pub outcome: Outcome,
    pub covariates: Vec<Covariate>,
}

impl LogisticMixedSpec {
    /// Patient-level covariates only.
    pub fn new(outcome: Outcome) -> Self {
        LogisticMixedSpec {
            outcome,
            covariates: Covariate::PATIENT.to_vec(),
        }
    }

    /// Adds the ward covariates when the config asks for them.
    pub fn for_config(outcome: Outcome, config: &StudyConfig) -> Self {
        let mut s = Self::new(outcome);
        if config.ward_level_covariates {
            s.covariates.extend(Covariate::WARD);
        }
        s
    }

    fn check(&self) -> Result<()> {
        if self.covariates.is_empty() {
            return Err(Error::Config("risk-adjustment covariate list is empty".into()));
        }
        let mut seen = self.covariates.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.covariates.len() {
            return Err(Error::Config("risk-adjustment covariates repeat".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticMixedFit {
    pub outcome: Outcome,
    pub covariates: Vec<Covariate>,
    pub alpha: f64,
    /// One coefficient per covariate, on the original covariate scale.
    pub eta: Vec<f64>,
    pub sigma_mu_sq: f64,
    pub sigma_nu_sq: f64,
    /// Predicted ward-year intercepts (posterior modes).
    pub mu_hat: BTreeMap<WardYear, f64>,
    /// Predicted hospital-year intercepts (posterior modes).
    pub nu_hat: BTreeMap<HospitalYear, f64>,
    /// Laplace-approximate marginal log-likelihood.
    pub loglik: f64,
    pub n_obs: usize,
    pub iterations: usize,
    pub converged: bool,
}

impl LogisticMixedFit {
    /// Linear predictor without random effects.
    pub fn fixed_part(&self, r: &AdmissionRecord) -> f64 {
        self.alpha
            + self
                .covariates
                .iter()
                .zip(&self.eta)
                .map(|(&c, &b)| b * r.covariate(c))
                .sum::<f64>()
    }
}

/// Records of one outcome in canonical order, grouped for the nested Schur solve.
struct GlmmData {
    n: usize,
    p: usize,
    /// Standardized design, intercept first, row-major.
    x: Vec<f64>,
    y: Vec<f64>,
    /// Record range of each ward-year; ward-years are contiguous.
    ward_start: Vec<usize>,
    /// Hospital-year of each ward-year; hospital-years are contiguous in ward order.
    ward_hosp: Vec<usize>,
    n_hosp: usize,
    ward_keys: Vec<WardYear>,
    hosp_keys: Vec<HospitalYear>,
    means: Vec<f64>,
    sds: Vec<f64>,
}

fn canonical_order(a: &AdmissionRecord, b: &AdmissionRecord, outcome: Outcome) -> Ordering {
    a.hospital_id
        .cmp(&b.hospital_id)
        .then(a.year.cmp(&b.year))
        .then(a.ward_id.cmp(&b.ward_id))
        .then(a.month.cmp(&b.month))
        .then(a.gender.cmp(&b.gender))
        .then(a.age.total_cmp(&b.age))
        .then(a.intcare.cmp(&b.intcare))
        .then(a.drg_weight.total_cmp(&b.drg_weight))
        .then(a.comorbidity.cmp(&b.comorbidity))
        .then(a.outcomes.get(outcome).cmp(&b.outcomes.get(outcome)))
}

impl GlmmData {
    fn build(ds: &AdmissionDataset, spec: &LogisticMixedSpec) -> Result<Self> {
        spec.check()?;
        let outcome = spec.outcome;
        let mut recs: Vec<&AdmissionRecord> = ds
            .records()
            .iter()
            .filter(|r| r.outcomes.get(outcome).is_some())
            .collect();
        // Sorting fixes the summation order, so estimates do not depend on file order.
        recs.sort_by(|a, b| canonical_order(a, b, outcome));
        let n = recs.len();
        let q = spec.covariates.len();
        let p = q + 1;

        let mut means = vec![0.0; q];
        let mut sds = vec![0.0; q];
        for (c, &cov) in spec.covariates.iter().enumerate() {
            let mut m = crate::data::Moments::default();
            for r in &recs {
                m.push(r.covariate(cov));
            }
            means[c] = m.mean;
            sds[c] = m.sd();
            if !(sds[c] > 0.0) {
                return Err(Error::Collinear {
                    columns: vec![cov.name().to_string()],
                });
            }
        }
        let mut x = Vec::with_capacity(n * p);
        let mut y = Vec::with_capacity(n);
        let mut ward_start = Vec::new();
        let mut ward_hosp = Vec::new();
        let mut ward_keys: Vec<WardYear> = Vec::new();
        let mut hosp_keys: Vec<HospitalYear> = Vec::new();
        for (i, r) in recs.iter().enumerate() {
            x.push(1.0);
            for (c, &cov) in spec.covariates.iter().enumerate() {
                x.push((r.covariate(cov) - means[c]) / sds[c]);
            }
            y.push(if r.outcomes.get(outcome) == Some(true) { 1.0 } else { 0.0 });
            let new_hosp = hosp_keys
                .last()
                .is_none_or(|h| h.hospital_id != r.hospital_id || h.year != r.year);
            if new_hosp {
                hosp_keys.push(HospitalYear {
                    hospital_id: r.hospital_id.clone(),
                    year: r.year,
                });
            }
            let new_ward = new_hosp || ward_keys.last().is_none_or(|w| w.ward_id != r.ward_id);
            if new_ward {
                ward_keys.push(WardYear {
                    hospital_id: r.hospital_id.clone(),
                    ward_id: r.ward_id.clone(),
                    year: r.year,
                });
                ward_start.push(i);
                ward_hosp.push(hosp_keys.len() - 1);
            }
        }
        ward_start.push(n);

        let hospitals = hosp_keys
            .iter()
            .map(|h| h.hospital_id.as_str())
            .collect::<std::collections::BTreeSet<_>>()
            .len();
        if hospitals < 2 {
            return Err(Error::Structure(format!(
                "{outcome} is observed in {hospitals} hospital(s); at least 2 are needed"
            )));
        }
        if ward_keys.len() < 2 {
            return Err(Error::Structure(format!(
                "{outcome} is observed in fewer than 2 ward-years"
            )));
        }
        if y.iter().all(|&v| v == y[0]) {
            let value = if y[0] == 1.0 { f64::INFINITY } else { f64::NEG_INFINITY };
            return Err(Error::Separation { index: 0, value });
        }
        Ok(GlmmData {
            n,
            p,
            x,
            y,
            ward_start,
            ward_hosp,
            n_hosp: hosp_keys.len(),
            ward_keys,
            hosp_keys,
            means,
            sds,
        })
    }

    fn n_ward(&self) -> usize {
        self.ward_keys.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    /// Penalized log-likelihood `sum loglik - |u|^2/2 - |v|^2/2`.
    fn penalized_loglik(&self, s: (f64, f64), m: &Mode) -> f64 {
        let mut ll = 0.0;
        for j in 0..self.n_ward() {
            let re = s.0 * m.u[j] + s.1 * m.v[self.ward_hosp[j]];
            for i in self.ward_start[j]..self.ward_start[j + 1] {
                let eta = crate::numerics::dot(self.row(i), &m.beta) + re;
                ll += bernoulli_loglik(self.y[i], eta);
            }
        }
        ll - 0.5 * (sq_norm(&m.u) + sq_norm(&m.v))
    }

    /// Original-scale intercept and slopes from standardized coefficients.
    fn original_scale(&self, beta: &[f64]) -> (f64, Vec<f64>) {
        let eta: Vec<f64> = (1..self.p).map(|c| beta[c] / self.sds[c - 1]).collect();
        let alpha = beta[0] - (1..self.p).map(|c| beta[c] * self.means[c - 1] / self.sds[c - 1]).sum::<f64>();
        (alpha, eta)
    }
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

#[derive(Debug, Clone)]
struct Mode {
    beta: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
}

struct ModeFit {
    mode: Mode,
    /// Laplace deviance: `-2 * penalized loglik + log det` of the random-effect Hessian block.
    deviance: f64,
    iterations: usize,
    converged: bool,
}

/// Newton decrement, relative to the objective, below which the mode is accepted.
const MODE_TOLERANCE: f64 = 1e-14;
const MODE_MAX_ITERATIONS: usize = 100;

fn fit_mode(d: &GlmmData, s: (f64, f64), start: &Mode) -> Result<ModeFit> {
    let p = d.p;
    let nw = d.n_ward();
    let nh = d.n_hosp;
    let (s_mu, s_nu) = s;
    let mut m = start.clone();
    let mut q_cur = d.penalized_loglik(s, &m);

    let mut g_beta = vec![0.0; p];
    let mut hbb = DenseMatrix::zeros(p, p);
    let mut xw = vec![0.0; nw * p];
    let mut rw = vec![0.0; nw];
    let mut ww = vec![0.0; nw];
    let mut last_logdet = 0.0;

    for iter in 1..=MODE_MAX_ITERATIONS {
        g_beta.iter_mut().for_each(|v| *v = 0.0);
        hbb.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        for j in 0..nw {
            let re = s_mu * m.u[j] + s_nu * m.v[d.ward_hosp[j]];
            let xj = &mut xw[j * p..(j + 1) * p];
            xj.iter_mut().for_each(|v| *v = 0.0);
            let (mut rj, mut wj) = (0.0, 0.0);
            for i in d.ward_start[j]..d.ward_start[j + 1] {
                let row = d.row(i);
                let mu = inv_logit(crate::numerics::dot(row, &m.beta) + re);
                let r = d.y[i] - mu;
                let w = mu * (1.0 - mu);
                rj += r;
                wj += w;
                for a in 0..p {
                    g_beta[a] += row[a] * r;
                    let wa = w * row[a];
                    xj[a] += wa;
                    for b in 0..=a {
                        hbb[(a, b)] += wa * row[b];
                    }
                }
            }
            rw[j] = rj;
            ww[j] = wj;
        }

        // eliminate u (diagonal a_j), then v (diagonal b_k)
        let g_u: Vec<f64> = (0..nw).map(|j| s_mu * rw[j] - m.u[j]).collect();
        let mut g_v: Vec<f64> = m.v.iter().map(|v| -v).collect();
        let mut w_k = vec![0.0; nh];
        for j in 0..nw {
            g_v[d.ward_hosp[j]] += s_nu * rw[j];
            w_k[d.ward_hosp[j]] += ww[j];
        }
        let a: Vec<f64> = ww.iter().map(|w| s_mu * s_mu * w + 1.0).collect();
        let c: Vec<f64> = ww.iter().map(|w| s_mu * s_nu * w).collect();
        let mut h2 = hbb.clone();
        let mut gb2 = g_beta.clone();
        let mut b_k: Vec<f64> = w_k.iter().map(|w| s_nu * s_nu * w + 1.0).collect();
        let mut gv2 = g_v.clone();
        let mut e = vec![0.0; nh * p];
        for j in 0..nw {
            let k = d.ward_hosp[j];
            let xj = &xw[j * p..(j + 1) * p];
            let f = s_mu * s_mu / a[j];
            for a_ in 0..p {
                gb2[a_] -= s_mu * xj[a_] * g_u[j] / a[j];
                for b_ in 0..=a_ {
                    h2[(a_, b_)] -= f * xj[a_] * xj[b_];
                }
                e[k * p + a_] += xj[a_] * (s_nu - s_mu * c[j] / a[j]);
            }
            b_k[k] -= c[j] * c[j] / a[j];
            gv2[k] -= c[j] * g_u[j] / a[j];
        }
        for k in 0..nh {
            let ek = &e[k * p..(k + 1) * p];
            for a_ in 0..p {
                gb2[a_] -= ek[a_] * gv2[k] / b_k[k];
                for b_ in 0..=a_ {
                    h2[(a_, b_)] -= ek[a_] * ek[b_] / b_k[k];
                }
            }
        }
        for a_ in 0..p {
            for b_ in 0..a_ {
                h2[(b_, a_)] = h2[(a_, b_)];
            }
        }
        let chol = Cholesky::factor(&h2).map_err(|err| match err {
            Error::NotPositiveDefinite { pivot } => {
                Error::Singular(format!("risk-adjustment design is rank deficient at column {pivot}"))
            }
            other => other,
        })?;
        let d_beta = chol.solve(&gb2);
        let d_v: Vec<f64> = (0..nh)
            .map(|k| (gv2[k] - crate::numerics::dot(&e[k * p..(k + 1) * p], &d_beta)) / b_k[k])
            .collect();
        let d_u: Vec<f64> = (0..nw)
            .map(|j| {
                let xj = &xw[j * p..(j + 1) * p];
                (g_u[j] - s_mu * crate::numerics::dot(xj, &d_beta) - c[j] * d_v[d.ward_hosp[j]]) / a[j]
            })
            .collect();
        let decrement = crate::numerics::dot(&g_beta, &d_beta)
            + crate::numerics::dot(&g_u, &d_u)
            + crate::numerics::dot(&g_v, &d_v);

        let logdet: f64 = a.iter().map(|v| v.ln()).sum::<f64>() + b_k.iter().map(|v| v.ln()).sum::<f64>();
        last_logdet = logdet;
        let floor = MODE_TOLERANCE * q_cur.abs().max(1.0);
        if decrement < floor {
            return finish(d, m, -2.0 * q_cur + logdet, iter, true);
        }

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = Mode {
                beta: m.beta.iter().zip(&d_beta).map(|(b, db)| b + t * db).collect(),
                u: m.u.iter().zip(&d_u).map(|(b, db)| b + t * db).collect(),
                v: m.v.iter().zip(&d_v).map(|(b, db)| b + t * db).collect(),
            };
            let q = d.penalized_loglik(s, &trial);
            if q.is_finite() && q > q_cur {
                m = trial;
                q_cur = q;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // no ascent resolvable in floating point: the current point is the mode
            return finish(d, m, -2.0 * q_cur + logdet, iter, decrement < 1e3 * floor);
        }
        if let Some(index) = m.beta.iter().position(|b| b.abs() > 4.0 * SEPARATION_BOUND) {
            return Err(Error::Separation {
                index,
                value: m.beta[index],
            });
        }
    }
    finish(d, m, -2.0 * q_cur + last_logdet, MODE_MAX_ITERATIONS, false)
}

fn finish(d: &GlmmData, mode: Mode, deviance: f64, iterations: usize, converged: bool) -> Result<ModeFit> {
    let (alpha, eta) = d.original_scale(&mode.beta);
    if let Some((index, &value)) = std::iter::once(&alpha)
        .chain(&eta)
        .enumerate()
        .find(|(_, v)| v.abs() > SEPARATION_BOUND)
    {
        return Err(Error::Separation { index, value });
    }
    Ok(ModeFit {
        mode,
        deviance,
        iterations,
        converged,
    })
}

fn initial_mode(d: &GlmmData) -> Result<Mode> {
    let x = DenseMatrix::from_row_major(d.n, d.p, d.x.clone())?;
    let fit = irls_fit(&x, &d.y, &vec![0.0; d.n], &vec![1.0; d.n])?;
    Ok(Mode {
        beta: fit.coefficients,
        u: vec![0.0; d.n_ward()],
        v: vec![0.0; d.n_hosp],
    })
}

fn scales(theta: &[f64]) -> (f64, f64) {
    let f = |t: f64| (0.5 * t.clamp(LOG_VARIANCE_BOUNDS.0, LOG_VARIANCE_BOUNDS.1)).exp();
    (f(theta[0]), f(theta[1]))
}

/// Laplace deviance as a function of the two log-variances, warm-starting each
/// inner solve at the previous mode.
struct ProfiledDeviance<'a> {
    data: &'a GlmmData,
    mode: Mode,
    failure: Option<Error>,
}

impl Objective for ProfiledDeviance<'_> {
    fn value(&mut self, theta: &[f64]) -> f64 {
        match fit_mode(self.data, scales(theta), &self.mode) {
            Ok(f) => {
                self.mode = f.mode;
                f.deviance
            }
            Err(e) => {
                self.failure.get_or_insert(e);
                f64::NAN
            }
        }
    }

    /// The inner solve leaves about 1e-14 relative error in a deviance of order
    /// `n`; a 1e-4 step keeps the difference quotient well above that.
    fn gradient(&mut self, x: &[f64], grad: &mut [f64]) {
        central_difference_gradient_into(|z| self.value(z), x, grad, 1e-4);
    }
}

/// Fits the logistic mixed model, estimating both variance components.
pub fn fit_logistic_mixed(ds: &AdmissionDataset, spec: &LogisticMixedSpec) -> Result<LogisticMixedFit> {
    let data = GlmmData::build(ds, spec)?;
    let start = initial_mode(&data)?;
    let tol = &ds.config().tolerances;
    let mut objective = ProfiledDeviance {
        data: &data,
        mode: start,
        failure: None,
    };
    let opts = QuasiNewtonOptions {
        tolerance: tol.glmm_gradient,
        max_iterations: tol.max_iterations,
    };
    let outer = minimize(&mut objective, &[START_LOG_VARIANCE; 2], &opts);
    if let Some(e) = objective.failure.take() {
        return Err(e);
    }
    let outer = outer?;
    let theta: Vec<f64> = outer
        .argmin
        .iter()
        .map(|t| t.clamp(LOG_VARIANCE_BOUNDS.0, LOG_VARIANCE_BOUNDS.1))
        .collect();
    let warm = objective.mode.clone();
    let fit = fit_mode(&data, scales(&theta), &warm)?;
    Ok(assemble(spec, &data, &theta_variances(&theta), fit, outer.iterations, outer.converged))
}

/// Fits with both variance components held fixed. Zero variances give a plain
/// logistic regression.
pub fn fit_logistic_mixed_with_variances(
    ds: &AdmissionDataset,
    spec: &LogisticMixedSpec,
    sigma_mu_sq: f64,
    sigma_nu_sq: f64,
) -> Result<LogisticMixedFit> {
    if !(sigma_mu_sq >= 0.0 && sigma_nu_sq >= 0.0 && sigma_mu_sq.is_finite() && sigma_nu_sq.is_finite()) {
        return Err(Error::Config("variance components must be finite and non-negative".into()));
    }
    let data = GlmmData::build(ds, spec)?;
    let start = initial_mode(&data)?;
    let fit = fit_mode(&data, (sigma_mu_sq.sqrt(), sigma_nu_sq.sqrt()), &start)?;
    Ok(assemble(spec, &data, &(sigma_mu_sq, sigma_nu_sq), fit, 0, true))
}

/// Laplace deviance at fixed variances; exposed for profile checks.
pub fn laplace_deviance(
    ds: &AdmissionDataset,
    spec: &LogisticMixedSpec,
    sigma_mu_sq: f64,
    sigma_nu_sq: f64,
) -> Result<f64> {
    let data = GlmmData::build(ds, spec)?;
    let start = initial_mode(&data)?;
    Ok(fit_mode(&data, (sigma_mu_sq.sqrt(), sigma_nu_sq.sqrt()), &start)?.deviance)
}

fn theta_variances(theta: &[f64]) -> (f64, f64) {
    (theta[0].exp(), theta[1].exp())
}

fn assemble(
    spec: &LogisticMixedSpec,
    data: &GlmmData,
    variances: &(f64, f64),
    fit: ModeFit,
    outer_iterations: usize,
    outer_converged: bool,
) -> LogisticMixedFit {
    let (s_mu, s_nu) = (variances.0.sqrt(), variances.1.sqrt());
    let (alpha, eta) = data.original_scale(&fit.mode.beta);
    let mu_hat = data
        .ward_keys
        .iter()
        .cloned()
        .zip(fit.mode.u.iter().map(|u| s_mu * u))
        .collect();
    let nu_hat = data
        .hosp_keys
        .iter()
        .cloned()
        .zip(fit.mode.v.iter().map(|v| s_nu * v))
        .collect();
    LogisticMixedFit {
        outcome: spec.outcome,
        covariates: spec.covariates.clone(),
        alpha,
        eta,
        sigma_mu_sq: variances.0,
        sigma_nu_sq: variances.1,
        mu_hat,
        nu_hat,
        loglik: -0.5 * fit.deviance,
        n_obs: data.n,
        iterations: outer_iterations + fit.iterations,
        converged: outer_converged && fit.converged,
    }
}

/// Per-record probabilities; `None` where the outcome is undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub outcome: Outcome,
    pub probabilities: Vec<Option<f64>>,
    /// Records whose ward-year or hospital-year was not in the fit; predicted with zero random effects.
    pub unseen: usize,
}

/// Inverse logit of the fixed part plus predicted random effects for every record.
pub fn predict_probabilities(fit: &LogisticMixedFit, ds: &AdmissionDataset) -> Predictions {
    let mut unseen = 0;
    let probabilities = ds
        .records()
        .iter()
        .map(|r| {
            r.outcomes.get(fit.outcome)?;
            let wy = WardYear {
                hospital_id: r.hospital_id.clone(),
                ward_id: r.ward_id.clone(),
                year: r.year,
            };
            let hy = HospitalYear {
                hospital_id: r.hospital_id.clone(),
                year: r.year,
            };
            let re = match (fit.mu_hat.get(&wy), fit.nu_hat.get(&hy)) {
                (Some(m), Some(n)) => m + n,
                _ => {
                    unseen += 1;
                    0.0
                }
            };
            Some(inv_logit(fit.fixed_part(r) + re))
        })
        .collect();
    Predictions {
        outcome: fit.outcome,
        probabilities,
        unseen,
    }
}
