//! Multivariate linear mixed model with outcome-specific hospital intercepts,
//! unstructured residual covariance and coordinates missing by design.
//!
//! Row `i` of hospital `h`: `y_i = B' x_i + a_h + e_i`, `a_h ~ N(0, D)` with `D`
//! diagonal, `e_i ~ N(0, Sigma / w_i)`, only the coordinates in the row's
//! observation pattern seen. The likelihood is computed from weighted sufficient
//! statistics per (hospital, pattern) with `B` profiled out by generalized least
//! squares. The ML gradient comes from the expected complete-data score, which
//! is also the E-step used for warm-start EM iterations.

use serde::{Deserialize, Serialize};

use super::design::{DidDesign, InteractionScheme, INTERCEPT};
use crate::data::{Criterion, Outcome, StudyConfig};
use crate::error::{Error, Result};
use crate::numerics::{
    central_difference_gradient, minimize_from, Cholesky, DenseMatrix, Objective, QuasiNewtonOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaStructure {
    Unstructured,
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HospitalEffects {
    Estimate,
    /// Variances fixed at zero: pooled generalized least squares.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedOptions {
    pub sigma: SigmaStructure,
    pub hospital_effects: HospitalEffects,
    pub criterion: Criterion,
    /// Max-norm gradient tolerance on the deviance divided by the number of
    /// rows. An absolute tolerance would sit below rounding noise on large panels.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// EM iterations run before the quasi-Newton refinement on a cold start.
    pub em_iterations: usize,
}

impl Default for MixedOptions {
    fn default() -> Self {
        MixedOptions {
            sigma: SigmaStructure::Unstructured,
            hospital_effects: HospitalEffects::Estimate,
            criterion: Criterion::Ml,
            tolerance: 1e-4,
            max_iterations: 500,
            em_iterations: 30,
        }
    }
}

impl MixedOptions {
    pub fn from_config(config: &StudyConfig) -> Self {
        MixedOptions {
            criterion: config.criterion,
            tolerance: config.tolerances.mixed_gradient,
            max_iterations: config.tolerances.max_iterations,
            ..Default::default()
        }
    }
}

// log-scale bounds for the Cholesky diagonal of Sigma and for D, on standardized outcomes
const LOG_CHOL_BOUNDS: (f64, f64) = (-15.0, 5.0);
const LOG_D_BOUNDS: (f64, f64) = (-30.0, 8.0);
const RIDGE: f64 = 1e-8;

/// Weighted sufficient statistics of the rows of one hospital sharing a pattern.
#[derive(Debug, Clone)]
struct GroupStats {
    pattern: usize,
    n: f64,
    w_sum: f64,
    /// `sum |o| ln w`
    log_w: f64,
    /// p x p
    sxx: Vec<f64>,
    /// p x K, zero columns for unobserved coordinates
    sxy: Vec<f64>,
    /// K x K
    syy: Vec<f64>,
    sx: Vec<f64>,
    sy: Vec<f64>,
}

impl GroupStats {
    fn new(pattern: usize, p: usize, k: usize) -> Self {
        GroupStats {
            pattern,
            n: 0.0,
            w_sum: 0.0,
            log_w: 0.0,
            sxx: vec![0.0; p * p],
            sxy: vec![0.0; p * k],
            syy: vec![0.0; k * k],
            sx: vec![0.0; p],
            sy: vec![0.0; k],
        }
    }

    fn add(&mut self, other: &GroupStats) {
        self.n += other.n;
        self.w_sum += other.w_sum;
        self.log_w += other.log_w;
        for (a, b) in [
            (&mut self.sxx, &other.sxx),
            (&mut self.sxy, &other.sxy),
            (&mut self.syy, &other.syy),
            (&mut self.sx, &other.sx),
            (&mut self.sy, &other.sy),
        ] {
            a.iter_mut().zip(b.iter()).for_each(|(x, y)| *x += y);
        }
    }
}

/// Standardized second-stage data reduced to sufficient statistics. Hospitals
/// can be resampled without revisiting the rows.
#[derive(Debug, Clone)]
pub struct MixedData {
    p: usize,
    k: usize,
    /// Observed coordinates of each pattern.
    patterns: Vec<Vec<usize>>,
    hospitals: Vec<Vec<GroupStats>>,
    pooled: Vec<GroupStats>,
    center: Vec<f64>,
    scale: Vec<f64>,
    intercept: usize,
    /// Observed values per outcome.
    n_obs: Vec<f64>,
}

impl MixedData {
    pub fn from_design(d: &DidDesign) -> Result<Self> {
        let p = d.x.cols();
        let k = d.n_outcomes();
        let intercept = d
            .layout
            .position(INTERCEPT)
            .ok_or_else(|| Error::Structure("design has no intercept column".into()))?;
        let mut center = vec![0.0; k];
        let mut scale = vec![1.0; k];
        for (kk, (c, s)) in center.iter_mut().zip(scale.iter_mut()).enumerate() {
            let mut m = crate::data::Moments::default();
            for i in 0..d.rows() {
                if let Some(v) = d.value(i, kk) {
                    m.push(v);
                }
            }
            *c = m.mean;
            if m.sd() > 0.0 {
                *s = m.sd();
            }
        }
        let mut patterns: Vec<u32> = Vec::new();
        let mask_of = |i: usize| -> u32 {
            (0..k)
                .filter(|&kk| d.value(i, kk).is_some())
                .fold(0, |m, kk| m | (1 << kk))
        };
        for i in 0..d.rows() {
            let m = mask_of(i);
            if !patterns.contains(&m) {
                patterns.push(m);
            }
        }
        patterns.sort_unstable();
        let pattern_coords: Vec<Vec<usize>> = patterns
            .iter()
            .map(|m| (0..k).filter(|kk| m & (1 << kk) != 0).collect())
            .collect();
        let mut hospitals: Vec<Vec<GroupStats>> = (0..d.hospitals.len())
            .map(|_| patterns.iter().enumerate().map(|(g, _)| GroupStats::new(g, p, k)).collect())
            .collect();
        let mut n_obs = vec![0.0; k];
        for i in 0..d.rows() {
            let g = patterns.binary_search(&mask_of(i)).expect("pattern listed");
            let w = d.weights[i];
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Validation(format!("row {i} has non-positive weight {w}")));
            }
            let st = &mut hospitals[d.hospital[i]][g];
            let x = d.x.row(i);
            let y: Vec<f64> = (0..k)
                .map(|kk| d.value(i, kk).map_or(0.0, |v| (v - center[kk]) / scale[kk]))
                .collect();
            st.n += 1.0;
            st.w_sum += w;
            st.log_w += pattern_coords[g].len() as f64 * w.ln();
            for a in 0..p {
                st.sx[a] += w * x[a];
                for b in 0..p {
                    st.sxx[a * p + b] += w * x[a] * x[b];
                }
                for &l in &pattern_coords[g] {
                    st.sxy[a * k + l] += w * x[a] * y[l];
                }
            }
            for &l in &pattern_coords[g] {
                st.sy[l] += w * y[l];
                n_obs[l] += 1.0;
                for &m in &pattern_coords[g] {
                    st.syy[l * k + m] += w * y[l] * y[m];
                }
            }
        }
        // drop empty groups
        for h in hospitals.iter_mut() {
            h.retain(|g| g.n > 0.0);
        }
        let mut data = MixedData {
            p,
            k,
            patterns: pattern_coords,
            hospitals,
            pooled: Vec::new(),
            center,
            scale,
            intercept,
            n_obs,
        };
        data.pool();
        Ok(data)
    }

    fn pool(&mut self) {
        let mut pooled: Vec<GroupStats> = (0..self.patterns.len())
            .map(|g| GroupStats::new(g, self.p, self.k))
            .collect();
        for h in &self.hospitals {
            for g in h {
                pooled[g.pattern].add(g);
            }
        }
        self.pooled = pooled;
    }

    pub fn n_hospitals(&self) -> usize {
        self.hospitals.len()
    }

    /// Data made of the listed hospitals, duplicates kept as distinct clusters.
    pub fn resample(&self, hospitals: &[usize]) -> MixedData {
        let mut n_obs = vec![0.0; self.k];
        let picked: Vec<Vec<GroupStats>> = hospitals.iter().map(|&h| self.hospitals[h].clone()).collect();
        for h in &picked {
            for g in h {
                for &l in &self.patterns[g.pattern] {
                    n_obs[l] += g.n;
                }
            }
        }
        let mut d = MixedData {
            hospitals: picked,
            pooled: Vec::new(),
            n_obs,
            ..self.clone_shell()
        };
        d.pool();
        d
    }

    fn clone_shell(&self) -> MixedData {
        MixedData {
            p: self.p,
            k: self.k,
            patterns: self.patterns.clone(),
            hospitals: Vec::new(),
            pooled: Vec::new(),
            center: self.center.clone(),
            scale: self.scale.clone(),
            intercept: self.intercept,
            n_obs: self.n_obs.clone(),
        }
    }

    fn n_theta(&self, opts: &MixedOptions) -> usize {
        let s = match opts.sigma {
            SigmaStructure::Unstructured => self.k * (self.k + 1) / 2,
            SigmaStructure::Diagonal => self.k,
        };
        s + match opts.hospital_effects {
            HospitalEffects::Estimate => self.k,
            HospitalEffects::Zero => 0,
        }
    }
}

/// Variance parameters decoded from the optimizer vector.
struct Params {
    /// Lower Cholesky factor of Sigma, K x K row-major.
    l: Vec<f64>,
    sigma: Vec<f64>,
    d: Vec<f64>,
    /// Coordinates of theta held at a bound.
    clamped: Vec<bool>,
}

fn decode(theta: &[f64], k: usize, opts: &MixedOptions) -> Params {
    let mut clamped = vec![false; theta.len()];
    let mut clamp = |i: usize, b: (f64, f64)| {
        let v = theta[i].clamp(b.0, b.1);
        clamped[i] = v != theta[i];
        v
    };
    let mut l = vec![0.0; k * k];
    let mut pos = 0;
    match opts.sigma {
        SigmaStructure::Unstructured => {
            for i in 0..k {
                for j in 0..=i {
                    l[i * k + j] = if i == j {
                        clamp(pos, LOG_CHOL_BOUNDS).exp()
                    } else {
                        theta[pos]
                    };
                    pos += 1;
                }
            }
        }
        SigmaStructure::Diagonal => {
            for i in 0..k {
                // theta is the log variance
                l[i * k + i] = (0.5 * clamp(pos, (2.0 * LOG_CHOL_BOUNDS.0, 2.0 * LOG_CHOL_BOUNDS.1))).exp();
                pos += 1;
            }
        }
    }
    let d = match opts.hospital_effects {
        HospitalEffects::Estimate => (0..k)
            .map(|i| clamp(pos + i, LOG_D_BOUNDS).exp())
            .collect(),
        HospitalEffects::Zero => vec![0.0; k],
    };
    let mut sigma = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            sigma[i * k + j] = (0..k).map(|m| l[i * k + m] * l[j * k + m]).sum();
        }
    }
    Params { l, sigma, d, clamped }
}

fn encode(sigma: &[f64], d: &[f64], k: usize, opts: &MixedOptions) -> Option<Vec<f64>> {
    let mut theta = Vec::new();
    match opts.sigma {
        SigmaStructure::Unstructured => {
            let ch = Cholesky::factor(&DenseMatrix::from_row_major(k, k, sigma.to_vec()).ok()?).ok()?;
            let l = ch.lower();
            for i in 0..k {
                for j in 0..=i {
                    theta.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
                }
            }
        }
        SigmaStructure::Diagonal => {
            for i in 0..k {
                if !(sigma[i * k + i] > 0.0) {
                    return None;
                }
                theta.push(sigma[i * k + i].ln());
            }
        }
    }
    if opts.hospital_effects == HospitalEffects::Estimate {
        theta.extend(d.iter().map(|v| v.max(1e-300).ln().max(LOG_D_BOUNDS.0)));
    }
    Some(theta)
}

/// Per-pattern pieces of Sigma.
struct PatternSigma {
    /// Sigma_oo^{-1} embedded in K x K.
    w: Vec<f64>,
    logdet: f64,
    /// Sigma_mo Sigma_oo^{-1}: |m| x |o|
    a: Vec<f64>,
    /// Sigma_{m|o}: |m| x |m|
    cond: Vec<f64>,
    missing: Vec<usize>,
}

fn pattern_sigma(sigma: &[f64], k: usize, obs: &[usize]) -> Option<PatternSigma> {
    let no = obs.len();
    let soo = DenseMatrix::from_row_major(
        no,
        no,
        obs.iter().flat_map(|&i| obs.iter().map(move |&j| sigma[i * k + j])).collect(),
    )
    .ok()?;
    let ch = Cholesky::factor(&soo).ok()?;
    let inv = ch.inverse();
    let mut w = vec![0.0; k * k];
    for (a, &i) in obs.iter().enumerate() {
        for (b, &j) in obs.iter().enumerate() {
            w[i * k + j] = inv[(a, b)];
        }
    }
    let missing: Vec<usize> = (0..k).filter(|i| !obs.contains(i)).collect();
    let nm = missing.len();
    let mut a = vec![0.0; nm * no];
    for (r, &mi) in missing.iter().enumerate() {
        for c in 0..no {
            a[r * no + c] = (0..no).map(|t| sigma[mi * k + obs[t]] * inv[(t, c)]).sum();
        }
    }
    let mut cond = vec![0.0; nm * nm];
    for (r, &mi) in missing.iter().enumerate() {
        for (c, &mj) in missing.iter().enumerate() {
            cond[r * nm + c] = sigma[mi * k + mj] - (0..no).map(|t| a[r * no + t] * sigma[obs[t] * k + mj]).sum::<f64>();
        }
    }
    Some(PatternSigma {
        w,
        logdet: ch.log_det(),
        a,
        cond,
        missing,
    })
}

/// Posterior pieces for one hospital.
struct HospitalPosterior {
    /// Posterior covariance of a_h, K x K.
    c: Vec<f64>,
    /// M^{-1} with M = I + D^{1/2} N D^{1/2}.
    m_inv: Vec<f64>,
    s0: Vec<f64>,
    /// pK x K
    u: Vec<f64>,
}

struct Evaluation {
    /// -2 log-likelihood (REML when requested) on standardized outcomes.
    deviance: f64,
    b: Vec<f64>,
    /// Gradient of the deviance with respect to theta (ML only).
    gradient: Option<Vec<f64>>,
    /// Expected residual cross-products and hospital second moments (E-step).
    s_ee: Vec<f64>,
    a2: Vec<f64>,
    n_rows: f64,
}

fn evaluate(data: &MixedData, theta: &[f64], opts: &MixedOptions, want: bool) -> Option<Evaluation> {
    let (p, k) = (data.p, data.k);
    let pk = p * k;
    let par = decode(theta, k, opts);
    let ps: Vec<PatternSigma> = data
        .patterns
        .iter()
        .map(|obs| pattern_sigma(&par.sigma, k, obs))
        .collect::<Option<_>>()?;
    let sqrt_d: Vec<f64> = par.d.iter().map(|v| v.sqrt()).collect();
    let estimate_re = opts.hospital_effects == HospitalEffects::Estimate;

    let mut q = DenseMatrix::zeros(pk, pk);
    let mut c = vec![0.0; pk];
    let mut yvy = 0.0;
    let mut logdet = 0.0;
    let mut n_obs_total = 0.0;
    let mut n_rows = 0.0;
    for (g, st) in data.pooled.iter().enumerate() {
        let w = &ps[g].w;
        logdet += st.n * ps[g].logdet - st.log_w;
        n_obs_total += st.n * data.patterns[g].len() as f64;
        n_rows += st.n;
        for kk in 0..k {
            for l in 0..=kk {
                let wkl = w[kk * k + l];
                if wkl == 0.0 {
                    continue;
                }
                for a in 0..p {
                    for b in 0..p {
                        q[(kk * p + a, l * p + b)] += wkl * st.sxx[a * p + b];
                    }
                }
            }
            for a in 0..p {
                c[kk * p + a] += (0..k).map(|l| st.sxy[a * k + l] * w[l * k + kk]).sum::<f64>();
            }
        }
        yvy += (0..k * k).map(|i| w[i] * st.syy[i]).sum::<f64>();
    }

    let mut posts: Vec<HospitalPosterior> = Vec::new();
    if estimate_re {
        posts.reserve(data.hospitals.len());
        for h in &data.hospitals {
            let mut nmat = vec![0.0; k * k];
            let mut s0 = vec![0.0; k];
            let mut u = vec![0.0; pk * k];
            for st in h {
                let w = &ps[st.pattern].w;
                for i in 0..k * k {
                    nmat[i] += st.w_sum * w[i];
                }
                for kk in 0..k {
                    s0[kk] += (0..k).map(|l| w[kk * k + l] * st.sy[l]).sum::<f64>();
                    for l in 0..k {
                        let wkl = w[kk * k + l];
                        if wkl != 0.0 {
                            for a in 0..p {
                                u[(kk * p + a) * k + l] += wkl * st.sx[a];
                            }
                        }
                    }
                }
            }
            let mut m = DenseMatrix::identity(k);
            for i in 0..k {
                for j in 0..k {
                    m[(i, j)] += sqrt_d[i] * nmat[i * k + j] * sqrt_d[j];
                }
            }
            let ch = Cholesky::factor(&m).ok()?;
            logdet += ch.log_det();
            let m_inv = ch.inverse();
            let mut cm = vec![0.0; k * k];
            for i in 0..k {
                for j in 0..k {
                    cm[i * k + j] = sqrt_d[i] * m_inv[(i, j)] * sqrt_d[j];
                }
            }
            // Q -= U C U', c -= U C s0, yvy -= s0' C s0
            let mut uc = vec![0.0; pk * k];
            for r in 0..pk {
                for l in 0..k {
                    uc[r * k + l] = (0..k).map(|t| u[r * k + t] * cm[t * k + l]).sum();
                }
            }
            for r in 0..pk {
                let ucr = &uc[r * k..(r + 1) * k];
                if ucr.iter().all(|v| *v == 0.0) {
                    continue;
                }
                for s in 0..=r {
                    let us = &u[s * k..(s + 1) * k];
                    q[(r, s)] -= (0..k).map(|l| ucr[l] * us[l]).sum::<f64>();
                }
                c[r] -= (0..k).map(|l| ucr[l] * s0[l]).sum::<f64>();
            }
            let cs0: Vec<f64> = (0..k).map(|i| (0..k).map(|j| cm[i * k + j] * s0[j]).sum()).collect();
            yvy -= (0..k).map(|i| s0[i] * cs0[i]).sum::<f64>();
            posts.push(HospitalPosterior {
                c: cm,
                m_inv: m_inv.as_slice().to_vec(),
                s0,
                u,
            });
        }
    }
    // Q was filled on the lower block triangle (l <= kk) for the W terms and the
    // lower triangle for the corrections: mirror the block part first.
    for kk in 0..k {
        for l in 0..kk {
            for a in 0..p {
                for b in 0..p {
                    let v = q[(kk * p + a, l * p + b)];
                    q[(l * p + b, kk * p + a)] = v;
                }
            }
        }
    }
    // hospital corrections were accumulated on the lower triangle only
    for r in 0..pk {
        for s in 0..r {
            q[(s, r)] = q[(r, s)];
        }
    }
    // Jacobi scaling: outcome blocks can differ by many orders of magnitude
    let qs: Vec<f64> = (0..pk).map(|r| q[(r, r)].sqrt()).collect();
    if qs.iter().any(|v| !(*v > 0.0)) {
        return None;
    }
    for r in 0..pk {
        for s in 0..pk {
            q[(r, s)] /= qs[r] * qs[s];
        }
    }
    let qch = Cholesky::factor(&q).ok()?;
    let cs: Vec<f64> = c.iter().zip(&qs).map(|(v, s)| v / s).collect();
    let b: Vec<f64> = qch.solve(&cs).iter().zip(&qs).map(|(v, s)| v / s).collect();
    let quad = yvy - b.iter().zip(&c).map(|(x, y)| x * y).sum::<f64>();
    let mut deviance = n_obs_total * (2.0 * std::f64::consts::PI).ln() + logdet + quad;
    if opts.criterion == Criterion::Reml {
        deviance += qch.log_det() + 2.0 * qs.iter().map(|v| v.ln()).sum::<f64>() - pk as f64 * (2.0 * std::f64::consts::PI).ln();
    }
    if !deviance.is_finite() {
        return None;
    }
    if !want {
        return Some(Evaluation {
            deviance,
            b,
            gradient: None,
            s_ee: Vec::new(),
            a2: Vec::new(),
            n_rows,
        });
    }

    // E-step: posterior means of a_h, expected residual cross-products.
    let bk = |a: usize, kk: usize| b[kk * p + a];
    let mut t_g: Vec<Vec<f64>> = data.pooled.iter().map(|_| vec![0.0; k * k]).collect();
    for (g, st) in data.pooled.iter().enumerate() {
        let obs = &data.patterns[g];
        let t = &mut t_g[g];
        for &i in obs {
            for &j in obs {
                let bsxy_ij: f64 = (0..p).map(|a| bk(a, i) * st.sxy[a * k + j]).sum();
                let bsxy_ji: f64 = (0..p).map(|a| bk(a, j) * st.sxy[a * k + i]).sum();
                let mut bsb = 0.0;
                for a in 0..p {
                    let ba = bk(a, i);
                    if ba == 0.0 {
                        continue;
                    }
                    bsb += ba * (0..p).map(|c2| st.sxx[a * p + c2] * bk(c2, j)).sum::<f64>();
                }
                t[i * k + j] = st.syy[i * k + j] - bsxy_ij - bsxy_ji + bsb;
            }
        }
    }
    let mut a2 = vec![0.0; k];
    let mut grad_d = vec![0.0; k];
    if estimate_re {
        for (hp, h) in posts.iter().zip(&data.hospitals) {
            // s = s0 - U' b
            let s: Vec<f64> = (0..k)
                .map(|l| hp.s0[l] - (0..pk).map(|r| hp.u[r * k + l] * b[r]).sum::<f64>())
                .collect();
            let m: Vec<f64> = (0..k).map(|i| (0..k).map(|j| hp.c[i * k + j] * s[j]).sum()).collect();
            let ds: Vec<f64> = (0..k).map(|j| sqrt_d[j] * s[j]).collect();
            for kk in 0..k {
                let z: f64 = (0..k).map(|j| hp.m_inv[kk * k + j] * ds[j]).sum();
                grad_d[kk] += z * z + hp.m_inv[kk * k + kk] - 1.0;
                a2[kk] += m[kk] * m[kk] + hp.c[kk * k + kk];
            }
            for st in h {
                let obs = &data.patterns[st.pattern];
                let t = &mut t_g[st.pattern];
                let sr: Vec<f64> = (0..k)
                    .map(|l| st.sy[l] - (0..p).map(|a| bk(a, l) * st.sx[a]).sum::<f64>())
                    .collect();
                for &i in obs {
                    for &j in obs {
                        t[i * k + j] += -sr[i] * m[j] - m[i] * sr[j] + st.w_sum * (m[i] * m[j] + hp.c[i * k + j]);
                    }
                }
            }
        }
    }
    // S_ee = sum_g P_g T_g P_g' + n_g Sigma_{m|o}
    let mut s_ee = vec![0.0; k * k];
    for (g, st) in data.pooled.iter().enumerate() {
        let obs = &data.patterns[g];
        let pg = &ps[g];
        let no = obs.len();
        let t = &t_g[g];
        let too = |a: usize, b2: usize| t[obs[a] * k + obs[b2]];
        for a in 0..no {
            for b2 in 0..no {
                s_ee[obs[a] * k + obs[b2]] += too(a, b2);
            }
        }
        let nm = pg.missing.len();
        // A T (m x o)
        let mut at = vec![0.0; nm * no];
        for r in 0..nm {
            for c2 in 0..no {
                at[r * no + c2] = (0..no).map(|t2| pg.a[r * no + t2] * too(t2, c2)).sum();
            }
        }
        for r in 0..nm {
            let mi = pg.missing[r];
            for c2 in 0..no {
                s_ee[mi * k + obs[c2]] += at[r * no + c2];
                s_ee[obs[c2] * k + mi] += at[r * no + c2];
            }
            for c2 in 0..nm {
                let mj = pg.missing[c2];
                let ata: f64 = (0..no).map(|t2| at[r * no + t2] * pg.a[c2 * no + t2]).sum();
                s_ee[mi * k + mj] += ata + st.n * pg.cond[r * nm + c2];
            }
        }
    }

    let gradient = if opts.criterion == Criterion::Ml {
        // dl/dSigma = G = 1/2 Sigma^{-1} (S_ee - N Sigma) Sigma^{-1}
        let sig = DenseMatrix::from_row_major(k, k, par.sigma.clone()).ok()?;
        let sinv = Cholesky::factor(&sig).ok()?.inverse();
        let mut diff = s_ee.clone();
        for i in 0..k * k {
            diff[i] -= n_rows * par.sigma[i];
        }
        let mut tmp = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                tmp[i * k + j] = (0..k).map(|t| sinv[(i, t)] * diff[t * k + j]).sum();
            }
        }
        let mut gmat = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                gmat[i * k + j] = 0.5 * (0..k).map(|t| tmp[i * k + t] * sinv[(t, j)]).sum::<f64>();
            }
        }
        let mut grad = Vec::with_capacity(theta.len());
        match opts.sigma {
            SigmaStructure::Unstructured => {
                // dl/dL = 2 G L
                for i in 0..k {
                    for j in 0..=i {
                        let v: f64 = 2.0 * (0..k).map(|t| gmat[i * k + t] * par.l[t * k + j]).sum::<f64>();
                        grad.push(if i == j { v * par.l[i * k + i] } else { v });
                    }
                }
            }
            SigmaStructure::Diagonal => {
                for i in 0..k {
                    grad.push(gmat[i * k + i] * par.sigma[i * k + i]);
                }
            }
        }
        if estimate_re {
            grad.extend(grad_d.iter().map(|g| 0.5 * g));
        }
        // deviance = -2 l
        for (i, g) in grad.iter_mut().enumerate() {
            *g = if par.clamped[i] { 0.0 } else { -2.0 * *g };
        }
        Some(grad)
    } else {
        None
    };
    Some(Evaluation {
        deviance,
        b,
        gradient,
        s_ee,
        a2,
        n_rows,
    })
}

struct Deviance<'a> {
    data: &'a MixedData,
    opts: &'a MixedOptions,
}

impl Objective for Deviance<'_> {
    fn value(&mut self, theta: &[f64]) -> f64 {
        evaluate(self.data, theta, self.opts, false).map_or(f64::NAN, |e| e.deviance)
    }

    fn gradient(&mut self, theta: &[f64], grad: &mut [f64]) {
        match self.opts.criterion {
            Criterion::Ml => match evaluate(self.data, theta, self.opts, true).and_then(|e| e.gradient) {
                Some(g) => grad.copy_from_slice(&g),
                None => grad.iter_mut().for_each(|v| *v = f64::NAN),
            },
            Criterion::Reml => {
                let (data, opts) = (self.data, self.opts);
                let g = central_difference_gradient(
                    |t| evaluate(data, t, opts, false).map_or(f64::NAN, |e| e.deviance),
                    theta,
                );
                grad.copy_from_slice(&g);
            }
        }
    }
}

/// Internal estimate on standardized outcomes, with the optimizer state.
#[derive(Debug, Clone)]
pub struct MixedEstimate {
    /// `b[k * p + a]` = coefficient of column `a` for outcome `k`, original scale.
    pub coefficients: Vec<f64>,
    pub sigma: Vec<f64>,
    pub hospital_variances: Vec<f64>,
    pub loglik: f64,
    pub theta: Vec<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    pub ridge: bool,
    /// BFGS inverse Hessian at `theta`, for warm starts.
    pub inverse_hessian: Vec<f64>,
}

/// ML EM iterations from `init`, or from Sigma = I/2, D = 0.1 on the
/// standardized scale.
fn em_start(data: &MixedData, opts: &MixedOptions, init: Option<&[f64]>) -> Result<(Vec<f64>, bool)> {
    let k = data.k;
    let ml = MixedOptions {
        criterion: Criterion::Ml,
        ..*opts
    };
    let (mut sigma, mut d, mut theta) = match init {
        Some(t) => {
            let par = decode(t, k, opts);
            (par.sigma, par.d, t.to_vec())
        }
        None => {
            let mut sigma = vec![0.0; k * k];
            for i in 0..k {
                sigma[i * k + i] = 0.5;
            }
            let d = vec![0.1; k];
            let theta = encode(&sigma, &d, k, &ml).expect("positive start");
            (sigma, d, theta)
        }
    };
    let mut ridge = false;
    let mut last = f64::INFINITY;
    for _ in 0..opts.em_iterations {
        let Some(e) = evaluate(data, &theta, &ml, true) else {
            break;
        };
        if (last - e.deviance).abs() <= 1e-10 * (1.0 + e.deviance.abs()) {
            break;
        }
        last = e.deviance;
        for i in 0..k * k {
            sigma[i] = e.s_ee[i] / e.n_rows;
        }
        if opts.sigma == SigmaStructure::Diagonal {
            for i in 0..k {
                for j in 0..k {
                    if i != j {
                        sigma[i * k + j] = 0.0;
                    }
                }
            }
        }
        let h = data.n_hospitals() as f64;
        for (dk, a2) in d.iter_mut().zip(&e.a2) {
            *dk = a2 / h;
        }
        theta = match encode(&sigma, &d, k, &ml) {
            Some(t) => t,
            None => {
                ridge = true;
                for i in 0..k {
                    sigma[i * k + i] += RIDGE;
                }
                match encode(&sigma, &d, k, &ml) {
                    Some(t) => t,
                    None => break,
                }
            }
        };
    }
    Ok((theta, ridge))
}

// residual sum of squares below this share of the (standardized) total counts as an exact fit
const EXACT_FIT_RSS: f64 = 1e-12;

/// Per-outcome least-squares coefficients (standardized scale) when every
/// outcome is interpolated exactly. Generalized least squares then returns the
/// same coefficients for every covariance, while the likelihood has no
/// maximum.
fn exact_fit(data: &MixedData) -> Option<Vec<f64>> {
    let (p, k) = (data.p, data.k);
    let mut b = vec![0.0; k * p];
    for l in 0..k {
        let mut xtx = DenseMatrix::zeros(p, p);
        let mut xty = vec![0.0; p];
        let mut yty = 0.0;
        for g in data.pooled.iter().filter(|g| data.patterns[g.pattern].contains(&l)) {
            for a in 0..p {
                xty[a] += g.sxy[a * k + l];
                for c in 0..p {
                    xtx[(a, c)] += g.sxx[a * p + c];
                }
            }
            yty += g.syy[l * k + l];
        }
        let bl = Cholesky::factor(&xtx).ok()?.solve(&xty);
        let rss = yty - bl.iter().zip(&xty).map(|(x, y)| x * y).sum::<f64>();
        if rss > EXACT_FIT_RSS * data.n_obs[l].max(1.0) {
            return None;
        }
        b[l * p..(l + 1) * p].copy_from_slice(&bl);
    }
    Some(b)
}

fn exact_estimate(data: &MixedData, mut b: Vec<f64>) -> MixedEstimate {
    let (p, k) = (data.p, data.k);
    for kk in 0..k {
        for a in 0..p {
            b[kk * p + a] *= data.scale[kk];
        }
        b[kk * p + data.intercept] += data.center[kk];
    }
    MixedEstimate {
        coefficients: b,
        sigma: vec![0.0; k * k],
        hospital_variances: vec![0.0; k],
        loglik: f64::INFINITY,
        theta: Vec::new(),
        iterations: 0,
        gradient_norm: 0.0,
        converged: true,
        ridge: false,
        inverse_hessian: Vec::new(),
    }
}

/// EM warm-up from `start` (or a neutral point) followed by BFGS.
pub fn fit_mixed_data(data: &MixedData, opts: &MixedOptions, start: Option<&[f64]>) -> Result<MixedEstimate> {
    fit_mixed_data_from(data, opts, start, None)
}

/// As [`fit_mixed_data`], optionally reusing the inverse Hessian of a related
/// fit (bootstrap replicates start next to the full-sample optimum).
pub fn fit_mixed_data_from(
    data: &MixedData,
    opts: &MixedOptions,
    start: Option<&[f64]>,
    inverse_hessian: Option<&[f64]>,
) -> Result<MixedEstimate> {
    if let Some(b) = exact_fit(data) {
        return Ok(exact_estimate(data, b));
    }
    if start.is_some_and(|t| t.len() != data.n_theta(opts)) {
        return Err(Error::Structure("warm start has the wrong number of parameters".into()));
    }
    let (theta0, ridge) = em_start(data, opts, start)?;
    let mut obj = Deviance { data, opts };
    let rows: f64 = data.pooled.iter().map(|g| g.n).sum();
    let qn = QuasiNewtonOptions {
        tolerance: opts.tolerance * rows.max(1.0),
        max_iterations: opts.max_iterations,
    };
    let h0 = inverse_hessian.filter(|h| h.len() == theta0.len() * theta0.len());
    let r = minimize_from(&mut obj, &theta0, h0, &qn)?;
    let e = evaluate(data, &r.argmin, opts, false)
        .ok_or_else(|| Error::Singular("mixed model is degenerate at the optimum".into()))?;
    let par = decode(&r.argmin, data.k, opts);
    let (p, k) = (data.p, data.k);
    let mut coefficients = e.b.clone();
    for kk in 0..k {
        for a in 0..p {
            coefficients[kk * p + a] *= data.scale[kk];
        }
        coefficients[kk * p + data.intercept] += data.center[kk];
    }
    let mut sigma = par.sigma.clone();
    for i in 0..k {
        for j in 0..k {
            sigma[i * k + j] *= data.scale[i] * data.scale[j];
        }
    }
    let hospital_variances = par.d.iter().zip(&data.scale).map(|(d, s)| d * s * s).collect();
    let mut loglik = -0.5 * e.deviance - data.n_obs.iter().zip(&data.scale).map(|(n, s)| n * s.ln()).sum::<f64>();
    if opts.criterion == Criterion::Reml {
        loglik += p as f64 * data.scale.iter().map(|s| s.ln()).sum::<f64>();
    }
    Ok(MixedEstimate {
        coefficients,
        sigma,
        hospital_variances,
        loglik,
        theta: r.argmin,
        iterations: r.iterations,
        gradient_norm: r.gradient_norm,
        converged: r.converged,
        ridge,
        inverse_hessian: r.inverse_hessian,
    })
}

/// Fitted second-stage model.
#[derive(Debug, Clone, Serialize)]
pub struct MultivariateMixedFit {
    pub scheme: InteractionScheme,
    pub outcomes: Vec<Outcome>,
    pub columns: Vec<String>,
    /// `coefficients[k][a]`: column `a` for outcome `k`.
    pub coefficients: Vec<Vec<f64>>,
    /// Hospital random-intercept variance per outcome.
    pub sigma_alpha_sq: Vec<f64>,
    /// Residual covariance, K x K.
    pub sigma: Vec<Vec<f64>>,
    pub loglik: f64,
    pub criterion: Criterion,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    /// A ridge was added to keep Sigma positive definite during EM.
    pub ridge_applied: bool,
    #[serde(skip)]
    pub theta: Vec<f64>,
    #[serde(skip)]
    pub inverse_hessian: Vec<f64>,
}

impl MultivariateMixedFit {
    pub fn from_estimate(design: &DidDesign, est: &MixedEstimate, criterion: Criterion) -> Self {
        let p = design.x.cols();
        let k = design.n_outcomes();
        MultivariateMixedFit {
            scheme: design.scheme(),
            outcomes: design.outcomes.clone(),
            columns: design.columns().to_vec(),
            coefficients: (0..k).map(|kk| est.coefficients[kk * p..(kk + 1) * p].to_vec()).collect(),
            sigma_alpha_sq: est.hospital_variances.clone(),
            sigma: (0..k).map(|i| est.sigma[i * k..(i + 1) * k].to_vec()).collect(),
            loglik: est.loglik,
            criterion,
            iterations: est.iterations,
            gradient_norm: est.gradient_norm,
            converged: est.converged,
            ridge_applied: est.ridge,
            theta: est.theta.clone(),
            inverse_hessian: est.inverse_hessian.clone(),
        }
    }

    pub fn coefficient(&self, column: &str, outcome: Outcome) -> Option<f64> {
        let a = self.columns.iter().position(|c| c == column)?;
        let k = self.outcomes.iter().position(|&o| o == outcome)?;
        Some(self.coefficients[k][a])
    }

    /// Residual correlation matrix.
    pub fn correlation(&self) -> Vec<Vec<f64>> {
        let k = self.outcomes.len();
        (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| self.sigma[i][j] / (self.sigma[i][i] * self.sigma[j][j]).sqrt())
                    .collect()
            })
            .collect()
    }
}

/// Fits the multivariate mixed model with default options.
pub fn fit_multivariate_mixed(design: &DidDesign) -> Result<MultivariateMixedFit> {
    fit_multivariate_mixed_with(design, &MixedOptions::default())
}

pub fn fit_multivariate_mixed_with(design: &DidDesign, opts: &MixedOptions) -> Result<MultivariateMixedFit> {
    let data = MixedData::from_design(design)?;
    let est = fit_mixed_data(&data, opts, None)?;
    Ok(MultivariateMixedFit::from_estimate(design, &est, opts.criterion))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::did::design::{build_design, build_design_with, DesignOptions};
    use crate::numerics::central_difference_gradient;
    use crate::riskadjust::{PanelCell, PanelDataset};
    use crate::data::Ownership;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Random panel with correlated errors and hospital effects; RETURN only on surgical wards.
    pub(crate) fn random_panel(seed: u64, hospitals: usize) -> PanelDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Normal::new(0.0, 1.0).unwrap();
        let cfg = StudyConfig::default();
        let mut cells = Vec::new();
        for h in 0..hospitals {
            let a: Vec<f64> = (0..5).map(|_| 0.01 * z.sample(&mut rng)).collect();
            for w in 0..3 {
                let treated = (h + w) % 2 == 0;
                let surgical = w != 1;
                for year in 2010..=2013 {
                    for month in 1..=12u8 {
                        if (month as usize + h) % 3 != 0 {
                            continue;
                        }
                        let common = z.sample(&mut rng);
                        let mut ho = [None; 5];
                        for (kk, slot) in ho.iter_mut().enumerate() {
                            let e = 0.01 * (0.6 * common + 0.8 * z.sample(&mut rng));
                            let mut v = 0.2 + 0.02 * kk as f64 + a[kk] + e;
                            if treated && year >= 2012 {
                                v -= 0.01;
                            }
                            *slot = Some(v.clamp(0.0, 1.0));
                        }
                        if !surgical {
                            ho[2] = None;
                        }
                        cells.push(PanelCell {
                            hospital_id: format!("H{h:03}"),
                            ward_id: format!("W{w}"),
                            year,
                            month,
                            month_index: cfg.month_index(year, month),
                            treated,
                            surgical,
                            ownership: [Ownership::Public, Ownership::Profit, Ownership::NoProfit][h % 3],
                            n_patients: 3 + (month as u32 % 4),
                            ho,
                        });
                    }
                }
            }
        }
        PanelDataset::new(cells, &cfg).unwrap()
    }

    fn design(seed: u64, hospitals: usize) -> DidDesign {
        build_design_with(
            &random_panel(seed, hospitals),
            InteractionScheme::Base,
            &DesignOptions {
                include_month: true,
                weighted: true,
            },
        )
        .unwrap()
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let d = design(1, 8);
        let data = MixedData::from_design(&d).unwrap();
        let opts = MixedOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Normal::new(0.0, 0.3).unwrap();
        for _ in 0..3 {
            let mut sigma = vec![0.0; 25];
            for i in 0..5 {
                sigma[i * 5 + i] = 0.6 + 0.1 * i as f64;
                for j in 0..i {
                    sigma[i * 5 + j] = 0.2;
                    sigma[j * 5 + i] = 0.2;
                }
            }
            let mut theta = encode(&sigma, &[0.2, 0.05, 0.3, 0.1, 0.15], 5, &opts).unwrap();
            theta.iter_mut().for_each(|t| *t += z.sample(&mut rng));
            let g = evaluate(&data, &theta, &opts, true).unwrap().gradient.unwrap();
            let fd = central_difference_gradient(|t| evaluate(&data, t, &opts, false).unwrap().deviance, &theta);
            for i in 0..theta.len() {
                assert!(
                    (g[i] - fd[i]).abs() <= 1e-4 * (1.0 + fd[i].abs()),
                    "component {i}: analytic {} vs fd {}",
                    g[i],
                    fd[i]
                );
            }
        }
    }

    #[test]
    fn diagonal_gradient_matches_finite_differences() {
        let d = design(2, 6);
        let data = MixedData::from_design(&d).unwrap();
        let opts = MixedOptions {
            sigma: SigmaStructure::Diagonal,
            ..Default::default()
        };
        let theta: Vec<f64> = (0..10).map(|i| -1.0 + 0.1 * i as f64).collect();
        let g = evaluate(&data, &theta, &opts, true).unwrap().gradient.unwrap();
        let fd = central_difference_gradient(|t| evaluate(&data, t, &opts, false).unwrap().deviance, &theta);
        for i in 0..theta.len() {
            assert!((g[i] - fd[i]).abs() <= 1e-4 * (1.0 + fd[i].abs()), "{i}: {} vs {}", g[i], fd[i]);
        }
    }

    /// Direct evaluation of the marginal likelihood from stacked rows, hospital by hospital.
    fn brute_force_deviance(d: &DidDesign, sigma: &[f64], dvar: &[f64], b: &[f64]) -> f64 {
        let k = d.n_outcomes();
        let p = d.x.cols();
        let mut total = 0.0;
        for h in 0..d.hospitals.len() {
            let mut idx = Vec::new();
            let mut resid = Vec::new();
            for i in (0..d.rows()).filter(|&i| d.hospital[i] == h) {
                for kk in 0..k {
                    if let Some(v) = d.value(i, kk) {
                        let fit: f64 = (0..p).map(|a| d.x[(i, a)] * b[kk * p + a]).sum();
                        idx.push((i, kk));
                        resid.push(v - fit);
                    }
                }
            }
            let m = idx.len();
            let mut v = DenseMatrix::zeros(m, m);
            for (r, &(i, ki)) in idx.iter().enumerate() {
                for (c, &(j, kj)) in idx.iter().enumerate() {
                    let mut x = if ki == kj { dvar[ki] } else { 0.0 };
                    if i == j {
                        x += sigma[ki * k + kj] / d.weights[i];
                    }
                    v[(r, c)] = x;
                }
            }
            let ch = Cholesky::factor(&v).unwrap();
            let sol = ch.solve(&resid);
            total += m as f64 * (2.0 * std::f64::consts::PI).ln()
                + ch.log_det()
                + resid.iter().zip(&sol).map(|(a, b)| a * b).sum::<f64>();
        }
        total
    }

    #[test]
    fn sufficient_statistics_match_stacked_likelihood() {
        let d = design(4, 4);
        let data = MixedData::from_design(&d).unwrap();
        let opts = MixedOptions::default();
        let mut sigma = vec![0.0; 25];
        for i in 0..5 {
            sigma[i * 5 + i] = 1.0 + 0.2 * i as f64;
            for j in 0..i {
                sigma[i * 5 + j] = 0.3;
                sigma[j * 5 + i] = 0.3;
            }
        }
        let dvar = [0.3, 0.1, 0.2, 0.05, 0.4];
        let theta = encode(&sigma, &dvar, 5, &opts).unwrap();
        let e = evaluate(&data, &theta, &opts, false).unwrap();
        // same quantities on the standardized scale used internally
        let std = {
            let mut s = d.clone();
            for kk in 0..5 {
                s = s.map_outcome(kk, |v| (v - data.center[kk]) / data.scale[kk]);
            }
            s
        };
        let brute = brute_force_deviance(&std, &sigma, &dvar, &e.b);
        assert!((brute - e.deviance).abs() < 1e-8 * brute.abs(), "{brute} vs {}", e.deviance);
        // and b is the GLS minimizer: perturbing it increases the brute-force deviance
        let mut b2 = e.b.clone();
        b2[3] += 1e-3;
        assert!(brute_force_deviance(&std, &sigma, &dvar, &b2) > brute);
    }

    #[test]
    fn zero_variance_diagonal_fit_equals_per_outcome_ols() {
        let panel = random_panel(5, 6);
        let d = build_design_with(
            &panel,
            InteractionScheme::Base,
            &DesignOptions {
                include_month: true,
                weighted: false,
            },
        )
        .unwrap();
        let opts = MixedOptions {
            sigma: SigmaStructure::Diagonal,
            hospital_effects: HospitalEffects::Zero,
            ..Default::default()
        };
        let fit = fit_multivariate_mixed_with(&d, &opts).unwrap();
        let p = d.x.cols();
        for kk in 0..d.n_outcomes() {
            let rows: Vec<usize> = (0..d.rows()).filter(|&i| d.value(i, kk).is_some()).collect();
            let mut xtx = DenseMatrix::zeros(p, p);
            let mut xty = vec![0.0; p];
            for &i in &rows {
                for a in 0..p {
                    xty[a] += d.x[(i, a)] * d.value(i, kk).unwrap();
                    for b in 0..p {
                        xtx[(a, b)] += d.x[(i, a)] * d.x[(i, b)];
                    }
                }
            }
            let ols = crate::numerics::cholesky_solve(&xtx, &xty).unwrap();
            for a in 0..p {
                assert!((ols[a] - fit.coefficients[kk][a]).abs() < 1e-6, "{kk} {a}");
            }
        }
    }

    #[test]
    fn noise_free_panel_is_fit_exactly() {
        let panel = random_panel(5, 8);
        let cells = panel
            .cells()
            .iter()
            .map(|c| {
                let mut c = c.clone();
                let t = f64::from(u8::from(c.treated));
                let post = f64::from(u8::from(c.year >= 2012));
                for (kk, slot) in c.ho.iter_mut().enumerate() {
                    if slot.is_some() {
                        *slot = Some(0.1 + 0.01 * kk as f64 + 0.02 * t - 0.005 * t * post + 1e-4 * f64::from(c.month_index));
                    }
                }
                c
            })
            .collect();
        let panel = panel.with_cells(cells).unwrap();
        let d = build_design(&panel, InteractionScheme::Base).unwrap();
        let fit = fit_multivariate_mixed(&d).unwrap();
        assert!(fit.converged);
        assert!(fit.sigma.iter().flatten().all(|v| *v == 0.0));
        for kk in 0..5 {
            assert!((fit.coefficient("TREATED", fit.outcomes[kk]).unwrap() - 0.02).abs() < 1e-12);
            assert!((fit.coefficient("MONTH", fit.outcomes[kk]).unwrap() - 1e-4).abs() < 1e-12);
            assert!((fit.coefficient("TREATED:YEAR_2013", fit.outcomes[kk]).unwrap() + 0.005).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_converges_and_recovers_structure() {
        let d = design(6, 30);
        let fit = fit_multivariate_mixed(&d).unwrap();
        assert!(fit.converged, "gradient {}", fit.gradient_norm);
        let corr = fit.correlation();
        // generator correlation 0.36 (0.6^2)
        assert!((corr[0][1] - 0.36).abs() < 0.1, "{corr:?}");
        let did = fit.coefficient("TREATED:YEAR_2012", Outcome::Mortality).unwrap();
        assert!((did + 0.01).abs() < 0.003, "{did}");
    }

    #[test]
    fn warm_start_reproduces_the_optimum() {
        let d = design(7, 10);
        let data = MixedData::from_design(&d).unwrap();
        let opts = MixedOptions {
            tolerance: 1e-9,
            ..Default::default()
        };
        let a = fit_mixed_data(&data, &opts, None).unwrap();
        let b = fit_mixed_data(&data, &opts, Some(&a.theta)).unwrap();
        assert!(a.converged && b.converged);
        for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn reml_inflates_variances_relative_to_ml() {
        let d = design(8, 6);
        let ml = fit_multivariate_mixed(&d).unwrap();
        let reml = fit_multivariate_mixed_with(
            &d,
            &MixedOptions {
                criterion: Criterion::Reml,
                tolerance: 1e-3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(reml.sigma[0][0] > ml.sigma[0][0]);
    }
}
