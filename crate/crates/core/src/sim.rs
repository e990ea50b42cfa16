//! Synthetic admissions and panels with known parameters, and recovery studies.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    AdmissionDataset, AdmissionRecord, Outcome, Outcomes, Ownership, StudyConfig, WardAttributes,
};
use crate::did::{
    build_design, did_column, extract_did_coefficients, fit_mixed_data, level_did_column, InteractionScheme,
    MixedData, MixedOptions, MultivariateMixedFit,
};
use crate::error::{Error, Result};
use crate::inference::cluster_bootstrap_fit;
use crate::numerics::{inv_logit, Cholesky, DenseMatrix};
use crate::riskadjust::{risk_adjust, PanelCell, PanelDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StructureTruth {
    pub hospitals: usize,
    pub wards_per_hospital: usize,
    pub patients_per_ward_month: usize,
    pub treated_fraction: f64,
    pub surgical_fraction: f64,
    /// Shares of public, for-profit and not-for-profit hospitals.
    pub ownership_mix: [f64; 3],
}

impl Default for StructureTruth {
    fn default() -> Self {
        StructureTruth {
            hospitals: 150,
            wards_per_hospital: 4,
            patients_per_ward_month: 5,
            treated_fraction: 0.71,
            surgical_fraction: 0.51,
            ownership_mix: [0.706, 0.204, 0.09],
        }
    }
}

/// Logistic admission model of one outcome. Covariates enter centred:
/// gender, (age - 60) / 10, intcare, drg_weight - 1.2, comorbidity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatientTruth {
    pub alpha: f64,
    pub eta: [f64; 5],
    pub sigma_mu_sq: f64,
    pub sigma_nu_sq: f64,
    pub treated: f64,
    pub surgical: f64,
    /// Logit shift of every ward in a year.
    pub year: BTreeMap<i32, f64>,
    /// Extra logit shift of treated wards in a year.
    pub did: BTreeMap<i32, f64>,
}

impl Default for PatientTruth {
    fn default() -> Self {
        PatientTruth {
            alpha: -2.0,
            eta: [0.1, 0.3, 0.8, 0.2, 0.3],
            sigma_mu_sq: 0.05,
            sigma_nu_sq: 0.05,
            treated: 0.0,
            surgical: 0.0,
            year: BTreeMap::new(),
            did: BTreeMap::new(),
        }
    }
}

/// Interaction terms of one level (SURGICAL, OWN_NOPROFIT, OWN_PROFIT).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LevelTruth {
    pub lambda: f64,
    pub mu: BTreeMap<i32, f64>,
    pub nu: f64,
    pub tau: BTreeMap<i32, f64>,
}

/// Linear panel model of one outcome.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PanelTruth {
    pub intercept: f64,
    pub beta: f64,
    pub gamma: BTreeMap<i32, f64>,
    pub delta: BTreeMap<i32, f64>,
    pub upsilon: f64,
    pub sigma_alpha_sq: f64,
    pub levels: BTreeMap<String, LevelTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorTruth {
    pub seed: u64,
    pub config: StudyConfig,
    pub structure: StructureTruth,
    pub patient: BTreeMap<Outcome, PatientTruth>,
    pub panel: BTreeMap<Outcome, PanelTruth>,
    /// Residual covariance of the panel model, rows in `Outcome::ALL` order.
    pub sigma: Vec<Vec<f64>>,
}

fn years_map(v: [f64; 4]) -> BTreeMap<i32, f64> {
    (2010..).zip(v).filter(|(_, x)| *x != 0.0).collect()
}

impl Default for GeneratorTruth {
    /// Desk-scale structure with outcome rates and fixed effects of realistic
    /// size; only readmissions carry DID effects in the patient model.
    fn default() -> Self {
        // Intercepts from `calibrate_alpha` (2e6 draws) for marginal 2010 rates of
        // 0.05, 0.13, 0.048, 0.011 and 0.009; readmission shifts give panel-level
        // DIDs of about -0.005 and -0.011.
        let patient = [
            (Outcome::Mortality, -3.3825, [0.0, 0.02, 0.04, 0.02], [0.0; 4]),
            (Outcome::Readmissions, -2.2800, [0.0, -0.05, -0.1, -0.17], [0.0, 0.0, -0.0518, -0.1223]),
            (Outcome::ReturnOr, -3.4271, [0.0, 0.04, -1.25, -1.2], [0.0; 4]),
            (Outcome::Transfers, -4.9720, [0.0, -0.1, -0.8, -0.8], [0.0; 4]),
            (Outcome::Voldisch, -5.1768, [0.0, -0.1, -0.1, -0.25], [0.0; 4]),
        ]
        .into_iter()
        .map(|(o, alpha, year, did)| {
            let t = PatientTruth {
                alpha,
                year: years_map(year),
                did: years_map(did),
                ..Default::default()
            };
            (o, t)
        })
        .collect();
        // (intercept, beta, gamma, delta, residual sd)
        let panel_rows = [
            (Outcome::Mortality, 0.044, 0.02, [0.0, 0.0, 0.001, -0.003], [0.0, 0.002, 0.001, 0.005], 0.004),
            (Outcome::Readmissions, 0.13, 0.004, [0.0, -0.005, -0.008, -0.012], [0.0, 0.001, -0.005, -0.011], 0.006),
            (Outcome::ReturnOr, 0.084, -0.037, [0.0, -0.002, -0.063, -0.062], [0.0, 0.002, 0.026, 0.025], 0.0015),
            (Outcome::Transfers, 0.009, 0.006, [0.0, -0.001, -0.003, -0.004], [0.0, 0.001, -0.005, -0.005], 0.0008),
            (Outcome::Voldisch, 0.009, 0.001, [0.0, -0.001, -0.001, -0.001], [0.0, -0.001, -0.001, -0.001], 0.0008),
        ];
        let sd: Vec<f64> = panel_rows.iter().map(|r| r.5).collect();
        let panel = panel_rows
            .iter()
            .map(|&(o, intercept, beta, gamma, delta, s)| {
                (
                    o,
                    PanelTruth {
                        intercept,
                        beta,
                        gamma: years_map(gamma),
                        delta: years_map(delta),
                        upsilon: 0.0,
                        sigma_alpha_sq: (0.5 * s) * (0.5 * s),
                        levels: BTreeMap::new(),
                    },
                )
            })
            .collect();
        let sigma = (0..5)
            .map(|i| (0..5).map(|j| if i == j { sd[i] * sd[i] } else { 0.2 * sd[i] * sd[j] }).collect())
            .collect();
        GeneratorTruth {
            seed: 20120101,
            config: StudyConfig::default(),
            structure: StructureTruth::default(),
            patient,
            panel,
            sigma,
        }
    }
}

const LEVEL_NAMES: [&str; 3] = ["SURGICAL", "OWN_NOPROFIT", "OWN_PROFIT"];

impl GeneratorTruth {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let t: GeneratorTruth = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("truth serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let s = &self.structure;
        if s.hospitals == 0 || s.wards_per_hospital == 0 || s.patients_per_ward_month == 0 {
            return Err(Error::Config(
                "hospitals, wards_per_hospital and patients_per_ward_month must be positive".into(),
            ));
        }
        for (name, f) in [("treated_fraction", s.treated_fraction), ("surgical_fraction", s.surgical_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} = {f} is outside [0, 1]")));
            }
        }
        if s.ownership_mix.iter().any(|m| !(0.0..=1.0).contains(m))
            || (s.ownership_mix.iter().sum::<f64>() - 1.0).abs() > 1e-6
        {
            return Err(Error::Config(format!("ownership_mix {:?} is not a distribution", s.ownership_mix)));
        }
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} is not finite")))
            }
        };
        for (o, p) in &self.patient {
            finite(&format!("{o} alpha"), p.alpha)?;
            for v in p.eta.iter().chain(p.year.values()).chain(p.did.values()).chain([&p.treated, &p.surgical]) {
                finite(&format!("{o} patient parameter"), *v)?;
            }
            if !(p.sigma_mu_sq >= 0.0 && p.sigma_nu_sq >= 0.0) {
                return Err(Error::Config(format!("{o} patient variances must be non-negative")));
            }
        }
        for (o, p) in &self.panel {
            for v in [p.intercept, p.beta, p.upsilon]
                .iter()
                .chain(p.gamma.values())
                .chain(p.delta.values())
            {
                finite(&format!("{o} panel parameter"), *v)?;
            }
            if !(p.sigma_alpha_sq >= 0.0) {
                return Err(Error::Config(format!("{o} sigma_alpha_sq must be non-negative")));
            }
            if let Some(l) = p.levels.keys().find(|l| !LEVEL_NAMES.contains(&l.as_str())) {
                return Err(Error::Config(format!("unknown level {l:?} for {o}")));
            }
        }
        if !self.sigma.is_empty() {
            self.sigma_cholesky()?;
        }
        Ok(())
    }

    fn sigma_cholesky(&self) -> Result<Cholesky> {
        let m = DenseMatrix::from_rows(&self.sigma)
            .map_err(|_| Error::Config("sigma must be a 5 x 5 matrix".into()))?;
        if m.rows() != 5 || m.cols() != 5 || !m.is_symmetric(1e-12) {
            return Err(Error::Config("sigma must be a symmetric 5 x 5 matrix".into()));
        }
        Cholesky::factor(&m).map_err(|_| Error::Config("sigma is not positive definite".into()))
    }

    pub fn with_seed(&self, seed: u64) -> GeneratorTruth {
        GeneratorTruth {
            seed,
            ..self.clone()
        }
    }
}

/// Wards of the synthetic structure with their fixed attributes.
struct Layout {
    /// (hospital, ward, attributes)
    wards: Vec<(usize, usize, WardAttributes)>,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Exactly `round(f * n)` ones in random positions, kept within `1..n-1` when `0 < f < 1`.
fn stratified(n: usize, f: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut count = (f * n as f64).round() as usize;
    if f > 0.0 && f < 1.0 && n >= 2 {
        count = count.clamp(1, n - 1);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let mut out = vec![false; n];
    for &i in idx.iter().take(count) {
        out[i] = true;
    }
    out
}

fn build_layout(truth: &GeneratorTruth) -> Layout {
    let s = &truth.structure;
    let n = s.hospitals * s.wards_per_hospital;
    let treated = stratified(n, s.treated_fraction, &mut rng_stream(truth.seed, 1));
    let surgical = stratified(n, s.surgical_fraction, &mut rng_stream(truth.seed, 2));
    let mut own_rng = rng_stream(truth.seed, 3);
    let n_profit = (s.ownership_mix[1] * s.hospitals as f64).round() as usize;
    let n_noprofit = ((s.ownership_mix[2] * s.hospitals as f64).round() as usize).min(s.hospitals - n_profit.min(s.hospitals));
    let profit = stratified(s.hospitals, n_profit as f64 / s.hospitals as f64, &mut own_rng);
    let rest: Vec<usize> = (0..s.hospitals).filter(|&h| !profit[h]).collect();
    let noprofit_pick = stratified(rest.len(), n_noprofit as f64 / rest.len().max(1) as f64, &mut own_rng);
    let mut ownership = vec![Ownership::Public; s.hospitals];
    for h in 0..s.hospitals {
        if profit[h] {
            ownership[h] = Ownership::Profit;
        }
    }
    for (i, &h) in rest.iter().enumerate() {
        if noprofit_pick[i] {
            ownership[h] = Ownership::NoProfit;
        }
    }
    let mut attr_rng = rng_stream(truth.seed, 4);
    let mut wards = Vec::with_capacity(n);
    for h in 0..s.hospitals {
        for w in 0..s.wards_per_hospital {
            let i = h * s.wards_per_hospital + w;
            wards.push((
                h,
                w,
                WardAttributes {
                    technology: attr_rng.random_bool(0.82),
                    teaching: attr_rng.random_bool(0.25),
                    specialised: attr_rng.random_bool(0.04),
                    surgical: surgical[i],
                    ownership: ownership[h],
                    treated: treated[i],
                },
            ));
        }
    }
    Layout { wards }
}

fn hospital_id(h: usize) -> String {
    format!("H{:04}", h + 1)
}

fn ward_id(w: usize) -> String {
    format!("W{:02}", w + 1)
}

/// Centred covariates in the order of `PatientTruth::eta`.
struct Patient {
    gender: bool,
    age: f64,
    intcare: u32,
    drg_weight: f64,
    comorbidity: u32,
}

impl Patient {
    fn draw(rng: &mut ChaCha8Rng) -> Patient {
        let drg = LogNormal::new(-0.110, 0.765).expect("valid lognormal");
        let com = Poisson::new(0.3).expect("valid poisson");
        let age = loop {
            let a: f64 = 59.6 + 21.1 * rng.sample::<f64, _>(StandardNormal);
            if a >= 2.0 {
                break a;
            }
        };
        Patient {
            gender: rng.random_bool(0.46),
            age: (age * 10.0).round() / 10.0,
            intcare: u32::from(rng.random_bool(0.05)),
            drg_weight: (drg.sample(rng) * 1000.0f64).round() / 1000.0,
            comorbidity: com.sample(rng) as u32,
        }
    }

    fn linear(&self, eta: &[f64; 5]) -> f64 {
        eta[0] * f64::from(u8::from(self.gender))
            + eta[1] * (self.age - 60.0) / 10.0
            + eta[2] * f64::from(self.intcare)
            + eta[3] * (self.drg_weight - 1.2)
            + eta[4] * f64::from(self.comorbidity)
    }
}

fn patient_logit(t: &PatientTruth, x: f64, re: f64, year: i32, treated: bool, surgical: bool) -> f64 {
    let mut v = t.alpha + x + re + t.year.get(&year).copied().unwrap_or(0.0);
    if treated {
        v += t.treated + t.did.get(&year).copied().unwrap_or(0.0);
    }
    if surgical {
        v += t.surgical;
    }
    v
}

/// Patient-level admissions drawn from the logistic model with ward-year and
/// hospital-year random intercepts; DID effects shift the logit of treated wards.
pub fn generate_synthetic(truth: &GeneratorTruth) -> Result<AdmissionDataset> {
    truth.validate()?;
    let layout = build_layout(truth);
    let cfg = &truth.config;
    let years = cfg.years();
    let mut rng = rng_stream(truth.seed, 5);
    let s = &truth.structure;
    let outcomes: Vec<(Outcome, &PatientTruth)> = Outcome::ALL
        .iter()
        .map(|o| (*o, truth.patient.get(o)))
        .map(|(o, t)| t.map(|t| (o, t)).ok_or_else(|| Error::Config(format!("no patient truth for {o}"))))
        .collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(layout.wards.len() * years.len() * 12 * s.patients_per_ward_month);
    for h in 0..s.hospitals {
        for &year in &years {
            let nu: Vec<f64> = outcomes
                .iter()
                .map(|(_, t)| t.sigma_nu_sq.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            for &(_, w, attrs) in layout.wards.iter().filter(|x| x.0 == h) {
                let mu: Vec<f64> = outcomes
                    .iter()
                    .map(|(_, t)| t.sigma_mu_sq.sqrt() * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                for month in 1..=12u8 {
                    for _ in 0..s.patients_per_ward_month {
                        let p = Patient::draw(&mut rng);
                        let mut out = Outcomes::default();
                        for (k, (o, t)) in outcomes.iter().enumerate() {
                            let eta = patient_logit(t, p.linear(&t.eta), mu[k] + nu[k], year, attrs.treated, attrs.surgical);
                            let y = rng.random::<f64>() < inv_logit(eta);
                            if *o != Outcome::ReturnOr || attrs.surgical {
                                out.set(*o, y);
                            }
                        }
                        records.push(AdmissionRecord {
                            hospital_id: hospital_id(h),
                            ward_id: ward_id(w),
                            year,
                            month,
                            gender: p.gender,
                            age: p.age,
                            intcare: p.intcare,
                            drg_weight: p.drg_weight,
                            comorbidity: p.comorbidity,
                            ward: attrs,
                            outcomes: out,
                        });
                    }
                }
            }
        }
    }
    AdmissionDataset::new(records, cfg)
}

/// Cells drawn from the linear panel model with hospital intercepts and
/// correlated residuals. RETURN is left missing on medical wards. Values are
/// clipped to [0, 1]; the calibrated defaults keep every cell at least five
/// residual SDs inside.
pub fn generate_panel(truth: &GeneratorTruth) -> Result<PanelDataset> {
    truth.validate()?;
    let chol = truth.sigma_cholesky()?;
    let l = chol.lower();
    let layout = build_layout(truth);
    let cfg = &truth.config;
    let years = cfg.years();
    let mut rng = rng_stream(truth.seed, 6);
    let s = &truth.structure;
    let pt: Vec<&PanelTruth> = Outcome::ALL
        .iter()
        .map(|o| truth.panel.get(o).ok_or_else(|| Error::Config(format!("no panel truth for {o}"))))
        .collect::<Result<_>>()?;
    let mut cells = Vec::with_capacity(layout.wards.len() * years.len() * 12);
    for h in 0..s.hospitals {
        let alpha: Vec<f64> = pt
            .iter()
            .map(|t| t.sigma_alpha_sq.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for &(_, w, attrs) in layout.wards.iter().filter(|x| x.0 == h) {
            for &year in &years {
                for month in 1..=12u8 {
                    let z: Vec<f64> = (0..5).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    let month_index = cfg.month_index(year, month);
                    let mut ho = [None; 5];
                    for (k, t) in pt.iter().enumerate() {
                        let e: f64 = (0..=k).map(|j| l[(k, j)] * z[j]).sum();
                        let v = panel_mean(t, year, month_index, &attrs) + alpha[k] + e;
                        if Outcome::ALL[k] != Outcome::ReturnOr || attrs.surgical {
                            ho[k] = Some(v.clamp(0.0, 1.0));
                        }
                    }
                    cells.push(PanelCell {
                        hospital_id: hospital_id(h),
                        ward_id: ward_id(w),
                        year,
                        month,
                        month_index,
                        treated: attrs.treated,
                        surgical: attrs.surgical,
                        ownership: attrs.ownership,
                        n_patients: s.patients_per_ward_month as u32,
                        ho,
                    });
                }
            }
        }
    }
    PanelDataset::new(cells, cfg)
}

fn panel_mean(t: &PanelTruth, year: i32, month_index: u32, a: &WardAttributes) -> f64 {
    let at = |m: &BTreeMap<i32, f64>| m.get(&year).copied().unwrap_or(0.0);
    let tr = if a.treated { 1.0 } else { 0.0 };
    let mut v = t.intercept + t.beta * tr + at(&t.gamma) + at(&t.delta) * tr + t.upsilon * f64::from(month_index);
    for (name, lt) in &t.levels {
        let on = match name.as_str() {
            "SURGICAL" => a.surgical,
            "OWN_NOPROFIT" => a.ownership == Ownership::NoProfit,
            "OWN_PROFIT" => a.ownership == Ownership::Profit,
            _ => false,
        };
        if on {
            v += lt.lambda + at(&lt.mu) + lt.nu * tr + at(&lt.tau) * tr;
        }
    }
    v
}

/// Panel-level DID of expected outcome probabilities implied by the patient
/// model, by common-random-number probing with `draws` synthetic patients.
/// Keyed by outcome and year (relative to the reference year).
pub fn probe_panel_truth(truth: &GeneratorTruth, draws: usize) -> Result<BTreeMap<Outcome, BTreeMap<i32, f64>>> {
    truth.validate()?;
    let cfg = &truth.config;
    let years = cfg.years();
    let mut out = BTreeMap::new();
    for (k, o) in Outcome::ALL.iter().enumerate() {
        let t = truth
            .patient
            .get(o)
            .ok_or_else(|| Error::Config(format!("no patient truth for {o}")))?;
        let mut rng = rng_stream(truth.seed ^ 0x5eed_0f_9e0be, 100 + k as u64);
        // mean probability per (year, treated)
        let mut sums = vec![[0.0f64; 2]; years.len()];
        for _ in 0..draws {
            let p = Patient::draw(&mut rng);
            let x = p.linear(&t.eta);
            let re = t.sigma_mu_sq.sqrt() * rng.sample::<f64, _>(StandardNormal)
                + t.sigma_nu_sq.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let surgical = *o == Outcome::ReturnOr || rng.random_bool(truth.structure.surgical_fraction);
            for (yi, &year) in years.iter().enumerate() {
                for g in 0..2 {
                    sums[yi][g] += inv_logit(patient_logit(t, x, re, year, g == 1, surgical));
                }
            }
        }
        let n = draws as f64;
        let r = years.iter().position(|&y| y == cfg.reference_year).expect("validated");
        let diff = |yi: usize| (sums[yi][1] - sums[yi][0]) / n;
        let m: BTreeMap<i32, f64> = years
            .iter()
            .enumerate()
            .filter(|(yi, _)| *yi != r)
            .map(|(yi, &y)| (y, diff(yi) - diff(r)))
            .collect();
        out.insert(*o, m);
    }
    Ok(out)
}

/// Intercept giving a marginal event rate of `target` for a patient in a
/// non-treated ward in a year without shifts, averaged over the covariate
/// and random-effect distributions (Newton on common random numbers).
pub fn calibrate_alpha(t: &PatientTruth, target: f64, draws: usize, seed: u64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) || draws == 0 {
        return Err(Error::Config(format!("calibration target {target} must lie in (0, 1)")));
    }
    let mut rng = rng_stream(seed, 200);
    let offsets: Vec<f64> = (0..draws)
        .map(|_| {
            let p = Patient::draw(&mut rng);
            p.linear(&t.eta)
                + t.sigma_mu_sq.sqrt() * rng.sample::<f64, _>(StandardNormal)
                + t.sigma_nu_sq.sqrt() * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let mut alpha = (target / (1.0 - target)).ln();
    for _ in 0..50 {
        let (m, dm) = offsets.iter().fold((0.0, 0.0), |(m, dm), o| {
            let p = inv_logit(alpha + o);
            (m + p, dm + p * (1.0 - p))
        });
        let step = (m - target * draws as f64) / dm;
        alpha -= step;
        if step.abs() < 1e-12 {
            break;
        }
    }
    Ok(alpha)
}

/// `(treated post - treated pre) - (control post - control pre)` over unweighted cell means.
pub fn four_means_did(panel: &PanelDataset, outcome: Outcome, pre_year: i32, post_year: i32) -> Result<f64> {
    let mut sums = [[(0.0f64, 0usize); 2]; 2];
    for c in panel.cells() {
        let t = usize::from(c.treated);
        let y = if c.year == pre_year {
            0
        } else if c.year == post_year {
            1
        } else {
            continue;
        };
        if let Some(v) = c.outcome(outcome) {
            sums[t][y].0 += v;
            sums[t][y].1 += 1;
        }
    }
    let mean = |t: usize, y: usize| {
        let (s, n) = sums[t][y];
        if n == 0 {
            Err(Error::Validation(format!(
                "no {} cells with {outcome} in {}",
                if t == 1 { "treated" } else { "control" },
                if y == 0 { pre_year } else { post_year }
            )))
        } else {
            Ok(s / n as f64)
        }
    };
    Ok((mean(1, 1)? - mean(1, 0)?) - (mean(0, 1)? - mean(0, 0)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecoveryPipeline {
    /// Admissions -> risk adjustment -> panel -> mixed model.
    Patient,
    /// Panel model draws -> mixed model.
    Panel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryOptions {
    pub pipeline: RecoveryPipeline,
    pub scheme: InteractionScheme,
    /// Bootstrap replicates per study replicate; `None` skips interval coverage.
    pub bootstrap_replicates: Option<usize>,
    pub probe_draws: usize,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        RecoveryOptions {
            pipeline: RecoveryPipeline::Patient,
            scheme: InteractionScheme::Base,
            bootstrap_replicates: Some(200),
            probe_draws: 1_000_000,
        }
    }
}

pub const MIN_RECOVERY_REPLICATES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterRecovery {
    pub term: String,
    pub outcome: Outcome,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    pub empirical_se: f64,
    /// Monte-Carlo SE of the mean estimate.
    pub mc_se: f64,
    /// Share of replicates whose 95% percentile interval covers the truth.
    pub coverage: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub pipeline: RecoveryPipeline,
    pub scheme: InteractionScheme,
    pub replicates: usize,
    pub n_failed: usize,
    pub parameters: Vec<ParameterRecovery>,
}

impl RecoveryReport {
    pub fn get(&self, term: &str, outcome: Outcome) -> Option<&ParameterRecovery> {
        self.parameters.iter().find(|p| p.term == term && p.outcome == outcome)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["term", "outcome", "truth", "mean_estimate", "bias", "empirical_se", "mc_se", "coverage", "n"])?;
        for p in &self.parameters {
            out.write_record([
                p.term.clone(),
                p.outcome.label().to_string(),
                p.truth.to_string(),
                p.mean_estimate.to_string(),
                p.bias.to_string(),
                p.empirical_se.to_string(),
                p.mc_se.to_string(),
                p.coverage.map_or(String::new(), |c| c.to_string()),
                p.n.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("recovery csv", e))?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-replicate seeds drawn sequentially from the truth's seed.
pub fn replicate_seeds(seed: u64, replicates: usize) -> Vec<u64> {
    let mut rng = rng_stream(seed, 7);
    (0..replicates).map(|_| rng.random()).collect()
}

/// Targets of a study: (term, outcome) -> truth.
fn recovery_targets(truth: &GeneratorTruth, opts: &RecoveryOptions) -> Result<Vec<(String, Outcome, f64)>> {
    let cfg = &truth.config;
    let post_years: Vec<i32> = cfg.years().into_iter().filter(|&y| y != cfg.reference_year).collect();
    let outcomes: Vec<Outcome> = cfg
        .ordered_outcomes()
        .into_iter()
        .filter(|o| opts.scheme.admits(*o))
        .collect();
    let mut out = Vec::new();
    match opts.pipeline {
        RecoveryPipeline::Patient => {
            let probe = probe_panel_truth(truth, opts.probe_draws)?;
            for &y in &post_years {
                for &o in &outcomes {
                    out.push((did_column(y), o, probe[&o][&y]));
                }
            }
        }
        RecoveryPipeline::Panel => {
            for &y in &post_years {
                for &o in &outcomes {
                    out.push((did_column(y), o, truth.panel[&o].delta.get(&y).copied().unwrap_or(0.0)));
                }
            }
            for level in opts.scheme.levels() {
                for &y in &post_years {
                    for &o in &outcomes {
                        let tau = truth.panel[&o]
                            .levels
                            .get(*level)
                            .and_then(|l| l.tau.get(&y))
                            .copied()
                            .unwrap_or(0.0);
                        out.push((level_did_column(level, y), o, tau));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// One replicate: estimates and optional percentile intervals per target.
type ReplicateOutcome = Vec<(f64, Option<(f64, f64)>)>;

fn run_replicate(
    truth: &GeneratorTruth,
    opts: &RecoveryOptions,
    targets: &[(String, Outcome, f64)],
) -> Result<ReplicateOutcome> {
    let panel = match opts.pipeline {
        RecoveryPipeline::Patient => risk_adjust(&generate_synthetic(truth)?)?.panel,
        RecoveryPipeline::Panel => generate_panel(truth)?,
    };
    let design = build_design(&panel, opts.scheme)?;
    let mopts = MixedOptions::from_config(&truth.config);
    let est = fit_mixed_data(&MixedData::from_design(&design)?, &mopts, None)?;
    if !est.converged {
        return Err(Error::LineSearch("replicate fit did not converge".into()));
    }
    let fit = MultivariateMixedFit::from_estimate(&design, &est, mopts.criterion);
    let boot = match opts.bootstrap_replicates {
        Some(b) => Some(cluster_bootstrap_fit(&design, &fit, &mopts, b, truth.seed ^ 0xb007)?),
        None => None,
    };
    let coefs = extract_did_coefficients(&fit);
    targets
        .iter()
        .map(|(term, o, _)| {
            let k = fit
                .outcomes
                .iter()
                .position(|x| x == o)
                .ok_or_else(|| Error::Structure(format!("{o} missing from the fit")))?;
            let est = coefs
                .delta
                .iter()
                .chain(&coefs.tau)
                .find(|r| &r.term == term)
                .map(|r| r.estimates[k])
                .ok_or_else(|| Error::Structure(format!("{term} missing from the fit")))?;
            let ci = boot.as_ref().and_then(|b| b.get(term, *o)).map(|t| (t.ci_low, t.ci_high));
            Ok((est, ci))
        })
        .collect()
}

pub fn recovery_study(truth: &GeneratorTruth, replicates: usize) -> Result<RecoveryReport> {
    let opts = RecoveryOptions {
        bootstrap_replicates: Some(truth.config.bootstrap_replicates),
        ..Default::default()
    };
    recovery_study_with(truth, replicates, &opts)
}

/// Runs independent replicates (in parallel, results independent of the pool
/// size) and summarizes bias, spread and interval coverage.
pub fn recovery_study_with(truth: &GeneratorTruth, replicates: usize, opts: &RecoveryOptions) -> Result<RecoveryReport> {
    if replicates < MIN_RECOVERY_REPLICATES {
        return Err(Error::Config(format!(
            "a recovery study needs at least {MIN_RECOVERY_REPLICATES} replicates, got {replicates}"
        )));
    }
    truth.validate()?;
    let targets = recovery_targets(truth, opts)?;
    let seeds = replicate_seeds(truth.seed, replicates);
    let results: Vec<Option<ReplicateOutcome>> = seeds
        .par_iter()
        .map(|&s| run_replicate(&truth.with_seed(s), opts, &targets).ok())
        .collect();
    let ok: Vec<&ReplicateOutcome> = results.iter().flatten().collect();
    let parameters = targets
        .iter()
        .enumerate()
        .map(|(i, (term, outcome, t))| {
            let v: Vec<f64> = ok.iter().map(|r| r[i].0).collect();
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let sd = if n > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                f64::NAN
            };
            let cis: Vec<(f64, f64)> = ok.iter().filter_map(|r| r[i].1).collect();
            let coverage = (!cis.is_empty())
                .then(|| cis.iter().filter(|(lo, hi)| lo <= t && t <= hi).count() as f64 / cis.len() as f64);
            ParameterRecovery {
                term: term.clone(),
                outcome: *outcome,
                truth: *t,
                mean_estimate: mean,
                bias: mean - t,
                empirical_se: sd,
                mc_se: sd / (n as f64).sqrt(),
                coverage,
                n,
            }
        })
        .collect();
    Ok(RecoveryReport {
        pipeline: opts.pipeline,
        scheme: opts.scheme,
        replicates,
        n_failed: replicates - ok.len(),
        parameters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_truth() -> GeneratorTruth {
        GeneratorTruth {
            structure: StructureTruth {
                hospitals: 6,
                wards_per_hospital: 2,
                patients_per_ward_month: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn default_truth_is_valid_and_round_trips() {
        let t = GeneratorTruth::default();
        t.validate().unwrap();
        assert_eq!(GeneratorTruth::from_json_str(&t.to_json()).unwrap(), t);
    }

    #[test]
    fn invalid_truths_are_config_errors() {
        let mut t = small_truth();
        t.structure.hospitals = 0;
        assert!(matches!(generate_synthetic(&t), Err(Error::Config(_))));
        let mut t = small_truth();
        t.sigma[0][1] = 1.0;
        t.sigma[1][0] = 1.0;
        assert!(matches!(t.validate(), Err(Error::Config(_))));
        let mut t = small_truth();
        t.structure.treated_fraction = 1.5;
        assert!(t.validate().is_err());
    }

    #[test]
    fn synthetic_admissions_are_deterministic_and_complete() {
        let t = small_truth();
        let a = generate_synthetic(&t).unwrap();
        let b = generate_synthetic(&t).unwrap();
        assert_eq!(a.records(), b.records());
        assert_eq!(a.len(), 6 * 2 * 48 * 2);
        assert!(a.records().iter().all(|r| r.outcomes.return_or.is_some() == r.ward.surgical));
        let c = generate_synthetic(&t.with_seed(99)).unwrap();
        assert_ne!(a.records(), c.records());
    }

    #[test]
    fn flat_logistic_truth_hits_the_base_rate() {
        let mut t = small_truth();
        t.structure.hospitals = 20;
        t.structure.wards_per_hospital = 2;
        t.structure.patients_per_ward_month = 27; // 20*2*48*27 = 51,840 records
        let p = 0.1f64;
        for pt in t.patient.values_mut() {
            *pt = PatientTruth {
                alpha: (p / (1.0 - p)).ln(),
                eta: [0.0; 5],
                sigma_mu_sq: 0.0,
                sigma_nu_sq: 0.0,
                ..Default::default()
            };
        }
        let ds = generate_synthetic(&t).unwrap();
        let n = ds.len() as f64;
        let rate = ds.records().iter().filter(|r| r.outcomes.mortality).count() as f64 / n;
        assert!((rate - p).abs() < 3.0 * (p * (1.0 - p) / n).sqrt(), "{rate}");
    }

    #[test]
    fn panel_generator_respects_structure() {
        let t = small_truth();
        let panel = generate_panel(&t).unwrap();
        assert_eq!(panel.len(), 6 * 2 * 48);
        assert_eq!(panel.cells(), generate_panel(&t).unwrap().cells());
        let treated = panel.cells().iter().filter(|c| c.treated).count() as f64 / panel.len() as f64;
        // round(0.71 * 12) = 9 treated wards
        assert!((treated - 9.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn four_means_is_exact_on_flat_panels() {
        let mut t = small_truth();
        for pt in t.panel.values_mut() {
            *pt = PanelTruth {
                intercept: 0.1,
                ..Default::default()
            };
        }
        t.sigma = (0..5).map(|i| (0..5).map(|j| if i == j { 1e-30 } else { 0.0 }).collect()).collect();
        let flat = generate_panel(&t).unwrap();
        assert!(four_means_did(&flat, Outcome::Mortality, 2011, 2012).unwrap().abs() < 1e-12);
        t.panel.get_mut(&Outcome::Mortality).unwrap().delta.insert(2012, 0.02);
        let shifted = generate_panel(&t).unwrap();
        let d = four_means_did(&shifted, Outcome::Mortality, 2011, 2012).unwrap();
        assert!((d - 0.02).abs() < 1e-12, "{d}");
        // linear in the injected effect
        t.panel.get_mut(&Outcome::Mortality).unwrap().delta.insert(2012, 0.06);
        let d3 = four_means_did(&generate_panel(&t).unwrap(), Outcome::Mortality, 2011, 2012).unwrap();
        assert!((d3 - 3.0 * d).abs() < 1e-12);
    }

    #[test]
    fn probe_truth_is_zero_without_effects_and_tracks_small_shifts() {
        let mut t = small_truth();
        let probe = probe_panel_truth(&t, 20_000).unwrap();
        assert!(probe[&Outcome::Mortality].values().all(|v| v.abs() < 1e-12));
        t.patient.get_mut(&Outcome::Mortality).unwrap().did.insert(2012, 0.01);
        let probe = probe_panel_truth(&t, 20_000).unwrap();
        let d = probe[&Outcome::Mortality][&2012];
        // small logit shift: probability shift close to shift * E[p(1-p)]
        assert!(d > 0.0 && d < 0.01 * 0.25, "{d}");
    }

    #[test]
    fn recovery_needs_fifty_replicates() {
        assert!(matches!(recovery_study(&small_truth(), 10), Err(Error::Config(_))));
    }
}
