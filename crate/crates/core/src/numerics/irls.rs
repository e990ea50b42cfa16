//! Iteratively reweighted least squares for Bernoulli responses with a logit link.

use super::matrix::{dot, Cholesky, DenseMatrix};
use crate::error::{Error, Result};

/// Coefficients beyond this magnitude on the logit scale indicate separation.
pub const SEPARATION_BOUND: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct IrlsFit {
    pub coefficients: Vec<f64>,
    pub deviance: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct IrlsOptions {
    /// Relative deviance change below which the fit is declared converged.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions {
            tolerance: 1e-8,
            max_iterations: 100,
        }
    }
}

#[inline]
pub fn inv_logit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `ln(1 + e^eta)` without overflow.
#[inline]
pub fn log1p_exp(eta: f64) -> f64 {
    if eta > 35.0 {
        eta
    } else if eta < -35.0 {
        eta.exp()
    } else {
        eta.exp().ln_1p()
    }
}

/// Bernoulli log-likelihood contribution `y*eta - ln(1 + e^eta)`.
#[inline]
pub fn bernoulli_loglik(y: f64, eta: f64) -> f64 {
    y * eta - log1p_exp(eta)
}

fn deviance(x: &DenseMatrix, y: &[f64], offset: &[f64], pw: &[f64], beta: &[f64]) -> f64 {
    (0..x.rows())
        .map(|i| -2.0 * pw[i] * bernoulli_loglik(y[i], offset[i] + dot(x.row(i), beta)))
        .sum()
}

/// Maximizes the weighted Bernoulli log-likelihood with logit link.
///
/// Converges when the relative deviance change drops below the tolerance
/// (default `1e-8`) or after `max_iterations` (default 100).
pub fn irls_fit(
    x: &DenseMatrix,
    y: &[f64],
    offset: &[f64],
    prior_weights: &[f64],
) -> Result<IrlsFit> {
    irls_fit_with(x, y, offset, prior_weights, &IrlsOptions::default())
}

pub fn irls_fit_with(
    x: &DenseMatrix,
    y: &[f64],
    offset: &[f64],
    prior_weights: &[f64],
    opts: &IrlsOptions,
) -> Result<IrlsFit> {
    let n = x.rows();
    let p = x.cols();
    if y.len() != n || offset.len() != n || prior_weights.len() != n {
        return Err(Error::Structure(format!(
            "IRLS inputs disagree in length: design has {n} rows, y {}, offset {}, weights {}",
            y.len(),
            offset.len(),
            prior_weights.len()
        )));
    }
    if let Some(i) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Structure(format!("response {i} is not binary: {}", y[i])));
    }
    let active: Vec<usize> = (0..n).filter(|&i| prior_weights[i] > 0.0).collect();
    if active.is_empty() {
        return Err(Error::Structure("no observations with positive weight".into()));
    }
    let first = y[active[0]];
    if active.iter().all(|&i| y[i] == first) {
        let value = if first == 1.0 { f64::INFINITY } else { f64::NEG_INFINITY };
        return Err(Error::Separation { index: 0, value });
    }

    // glm-style starting values: mu = (w*y + 0.5) / (w + 1)
    let mut eta: Vec<f64> = (0..n)
        .map(|i| {
            let w = prior_weights[i];
            let mu = (w * y[i] + 0.5) / (w + 1.0);
            logit(mu)
        })
        .collect();
    let mut beta = vec![0.0; p];
    let mut dev_old = f64::INFINITY;
    let mut xtwx = DenseMatrix::zeros(p, p);
    let mut xtwz = vec![0.0; p];

    for iter in 1..=opts.max_iterations {
        xtwx.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        xtwz.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            let pw = prior_weights[i];
            if pw <= 0.0 {
                continue;
            }
            let mu = inv_logit(eta[i]);
            let var = (mu * (1.0 - mu)).max(1e-12);
            let w = pw * var;
            let z = eta[i] - offset[i] + (y[i] - mu) / var;
            let row = x.row(i);
            for a in 0..p {
                let wa = w * row[a];
                xtwz[a] += wa * z;
                for b in 0..=a {
                    xtwx[(a, b)] += wa * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtwx[(b, a)] = xtwx[(a, b)];
            }
        }
        let chol = Cholesky::factor(&xtwx).map_err(|e| match e {
            Error::NotPositiveDefinite { pivot } => {
                Error::Singular(format!("design is rank deficient at column {pivot}"))
            }
            other => other,
        })?;
        let mut candidate = chol.solve(&xtwz);
        let mut dev = deviance(x, y, offset, prior_weights, &candidate);
        // step halving when the deviance does not improve
        let mut halvings = 0;
        while (!dev.is_finite() || dev > dev_old * (1.0 + 1e-12)) && halvings < 30 {
            for (c, b) in candidate.iter_mut().zip(&beta) {
                *c = 0.5 * (*c + b);
            }
            dev = deviance(x, y, offset, prior_weights, &candidate);
            halvings += 1;
        }
        if let Some((index, &value)) = candidate
            .iter()
            .enumerate()
            .find(|(_, v)| v.abs() > SEPARATION_BOUND)
        {
            return Err(Error::Separation { index, value });
        }
        beta = candidate;
        for i in 0..n {
            eta[i] = offset[i] + dot(x.row(i), &beta);
        }
        if dev_old.is_finite() && (dev_old - dev).abs() / (dev.abs() + 0.1) < opts.tolerance {
            // fitted probabilities numerically 0 or 1: the deviance converged to
            // zero along a diverging direction
            if active.iter().any(|&i| eta[i].abs() > SEPARATION_BOUND) {
                let (index, &value) = beta
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                    .expect("non-empty design");
                return Err(Error::Separation { index, value });
            }
            return Ok(IrlsFit {
                coefficients: beta,
                deviance: dev,
                iterations: iter,
                converged: true,
            });
        }
        dev_old = dev;
    }
    Ok(IrlsFit {
        coefficients: beta,
        deviance: dev_old,
        iterations: opts.max_iterations,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intercept_design(n: usize) -> DenseMatrix {
        DenseMatrix::from_row_major(n, 1, vec![1.0; n]).unwrap()
    }

    #[test]
    fn intercept_only_recovers_logit_of_mean() {
        let y = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let n = y.len();
        let fit = irls_fit(&intercept_design(n), &y, &vec![0.0; n], &vec![1.0; n]).unwrap();
        assert!(fit.converged);
        assert!((fit.coefficients[0] - (-1.0986122886681098)).abs() < 1e-8);
    }

    #[test]
    fn constant_response_is_separation() {
        let y = [1.0; 6];
        let err = irls_fit(&intercept_design(6), &y, &[0.0; 6], &[1.0; 6]).unwrap_err();
        assert!(matches!(err, Error::Separation { .. }));
    }

    #[test]
    fn perfectly_separated_covariate_detected() {
        let xs = [-3.0, -2.0, -1.0, 1.0, 2.0, 3.0];
        let y = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let vals: Vec<f64> = xs.iter().flat_map(|&x| [1.0, x]).collect();
        let x = DenseMatrix::from_row_major(6, 2, vals).unwrap();
        let err = irls_fit(&x, &y, &[0.0; 6], &[1.0; 6]).unwrap_err();
        assert!(matches!(err, Error::Separation { .. }), "{err:?}");
    }

    #[test]
    fn duplicated_column_is_singular() {
        let vals: Vec<f64> = (0..8).flat_map(|i| [1.0, i as f64, i as f64]).collect();
        let x = DenseMatrix::from_row_major(8, 3, vals).unwrap();
        let y = [0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        assert!(matches!(
            irls_fit(&x, &y, &[0.0; 8], &[1.0; 8]),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn offset_shifts_intercept() {
        let y = [1.0, 0.0, 0.0, 0.0];
        let fit = irls_fit(&intercept_design(4), &y, &[0.5; 4], &[1.0; 4]).unwrap();
        assert!((fit.coefficients[0] + 0.5 - logit(0.25)).abs() < 1e-8);
    }

    #[test]
    fn log1p_exp_is_stable() {
        assert_eq!(log1p_exp(800.0), 800.0);
        assert!(log1p_exp(-800.0) >= 0.0);
        assert!((log1p_exp(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
