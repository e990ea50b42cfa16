//! BFGS with a backtracking line search.

use super::matrix::{dot, norm_inf};
use crate::error::{Error, Result};

/// Relative step used by central finite differences: `h = 1e-6 * (1 + |x_i|)`.
pub const FD_RELATIVE_STEP: f64 = 1e-6;

/// A function to minimize. Gradients fall back to central finite differences.
pub trait Objective {
    fn value(&mut self, x: &[f64]) -> f64;

    /// Writes the gradient at `x` into `grad`.
    fn gradient(&mut self, x: &[f64], grad: &mut [f64]) {
        central_difference_gradient_into(|z| self.value(z), x, grad, FD_RELATIVE_STEP);
    }
}

struct ValueOnly<F>(F);

impl<F: FnMut(&[f64]) -> f64> Objective for ValueOnly<F> {
    fn value(&mut self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

struct WithGradient<F>(F, Vec<f64>);

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Objective for WithGradient<F> {
    fn value(&mut self, x: &[f64]) -> f64 {
        let mut scratch = std::mem::take(&mut self.1);
        scratch.resize(x.len(), 0.0);
        let v = (self.0)(x, &mut scratch);
        self.1 = scratch;
        v
    }

    fn gradient(&mut self, x: &[f64], grad: &mut [f64]) {
        (self.0)(x, grad);
    }
}

pub fn central_difference_gradient<F: FnMut(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    central_difference_gradient_into(f, x, &mut g, FD_RELATIVE_STEP);
    g
}

/// Central differences with step `rel_step * (1 + |x_i|)`. Objectives that are
/// only accurate to a few ulps of a large value need a step well above the default.
pub fn central_difference_gradient_into<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], grad: &mut [f64], rel_step: f64) {
    let mut z = x.to_vec();
    for i in 0..x.len() {
        let h = rel_step * (1.0 + x[i].abs());
        z[i] = x[i] + h;
        let up = f(&z);
        z[i] = x[i] - h;
        let down = f(&z);
        z[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuasiNewtonOptions {
    /// Convergence threshold on the max-norm of the gradient.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for QuasiNewtonOptions {
    fn default() -> Self {
        QuasiNewtonOptions {
            tolerance: 1e-6,
            max_iterations: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub argmin: Vec<f64>,
    pub objective: f64,
    /// Max-norm of the gradient at `argmin`.
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Final BFGS inverse Hessian approximation, row-major.
    pub inverse_hessian: Vec<f64>,
}

/// Minimizes `f` from `x0` using finite-difference gradients.
pub fn quasi_newton_minimize<F: FnMut(&[f64]) -> f64>(f: F, x0: &[f64], tol: f64) -> Result<OptimResult> {
    let opts = QuasiNewtonOptions {
        tolerance: tol,
        ..Default::default()
    };
    minimize(&mut ValueOnly(f), x0, &opts)
}

/// Minimizes with an analytic gradient; `fg(x, grad)` returns the value and fills `grad`.
pub fn quasi_newton_minimize_with_gradient<F: FnMut(&[f64], &mut [f64]) -> f64>(
    fg: F,
    x0: &[f64],
    opts: &QuasiNewtonOptions,
) -> Result<OptimResult> {
    minimize(&mut WithGradient(fg, Vec::new()), x0, opts)
}

pub fn minimize<O: Objective + ?Sized>(
    objective: &mut O,
    x0: &[f64],
    opts: &QuasiNewtonOptions,
) -> Result<OptimResult> {
    minimize_from(objective, x0, None, opts)
}

/// BFGS started from a given inverse Hessian approximation, typically the one
/// returned by a fit of a closely related problem.
pub fn minimize_from<O: Objective + ?Sized>(
    objective: &mut O,
    x0: &[f64],
    inverse_hessian: Option<&[f64]>,
    opts: &QuasiNewtonOptions,
) -> Result<OptimResult> {
    let n = x0.len();
    if inverse_hessian.is_some_and(|h| h.len() != n * n) {
        return Err(Error::Structure("inverse Hessian does not match the start point".into()));
    }
    let mut x = x0.to_vec();
    let mut fx = objective.value(&x);
    if !fx.is_finite() {
        return Err(Error::LineSearch("objective is not finite at the starting point".into()));
    }
    let mut g = vec![0.0; n];
    objective.gradient(&x, &mut g);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::LineSearch("gradient is not finite at the starting point".into()));
    }
    // inverse Hessian approximation, row-major
    let mut h = inverse_hessian.map_or_else(|| identity(n), <[f64]>::to_vec);
    let mut scaled = inverse_hessian.is_some();
    let mut iterations = 0;
    let mut trial = vec![0.0; n];
    let mut g_new = vec![0.0; n];

    while iterations < opts.max_iterations {
        if norm_inf(&g) <= opts.tolerance {
            break;
        }
        iterations += 1;
        let mut d = mat_vec(&h, &g, n);
        d.iter_mut().for_each(|v| *v = -*v);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            h = identity(n);
            scaled = false;
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let mut alpha = if scaled { 1.0 } else { (1.0 / norm_inf(&d)).min(1.0) };
        let mut accepted = None;
        let mut any_finite = false;
        let mut have_gradient = false;
        // rounding noise of the objective value
        let noise = 1e-10 * fx.abs().max(1.0);
        for _ in 0..60 {
            for i in 0..n {
                trial[i] = x[i] + alpha * d[i];
            }
            let ft = objective.value(&trial);
            if ft.is_finite() {
                any_finite = true;
                if ft <= fx + 1e-4 * alpha * slope {
                    accepted = Some(ft);
                    break;
                }
                // approximate Wolfe (Hager & Zhang): once the decrease is below the
                // noise floor, rely on the directional derivative instead
                if ft <= fx + noise {
                    objective.gradient(&trial, &mut g_new);
                    let dslope = dot(&g_new, &d);
                    if dslope.is_finite() && dslope >= 0.9 * slope && dslope <= -(1.0 - 2e-4) * slope {
                        have_gradient = true;
                        accepted = Some(ft);
                        break;
                    }
                }
                // safeguarded quadratic interpolation
                let denom = 2.0 * (ft - fx - slope * alpha);
                let next = if denom > 0.0 { -slope * alpha * alpha / denom } else { 0.5 * alpha };
                alpha = next.clamp(0.1 * alpha, 0.5 * alpha);
            } else {
                alpha *= 0.25;
            }
        }
        let Some(f_trial) = accepted else {
            if !any_finite {
                return Err(Error::LineSearch(format!(
                    "objective not finite along the search direction at iteration {iterations}"
                )));
            }
            break;
        };
        if !have_gradient {
            objective.gradient(&trial, &mut g_new);
        }
        if g_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::LineSearch(format!(
                "gradient not finite at iteration {iterations}"
            )));
        }
        let s: Vec<f64> = (0..n).map(|i| trial[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy = dot(&s, &y);
        let step_small = norm_inf(&s) <= 1e-14 * (1.0 + norm_inf(&x));
        let f_change = (fx - f_trial).abs();
        x.copy_from_slice(&trial);
        fx = f_trial;
        g.copy_from_slice(&g_new);
        if sy > 1e-12 * crate::numerics::norm2(&s) * crate::numerics::norm2(&y) {
            if !scaled {
                let yy = dot(&y, &y);
                let gamma = sy / yy;
                h = identity(n);
                h.iter_mut().for_each(|v| *v *= gamma);
                scaled = true;
            }
            bfgs_update(&mut h, &s, &y, sy, n);
        }
        if step_small && f_change <= 1e-15 * fx.abs().max(1.0) {
            break;
        }
    }
    let gradient_norm = norm_inf(&g);
    Ok(OptimResult {
        argmin: x,
        objective: fx,
        gradient_norm,
        iterations,
        converged: gradient_norm <= opts.tolerance,
        inverse_hessian: h,
    })
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

fn mat_vec(h: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| dot(&h[i * n..(i + 1) * n], v)).collect()
}

/// `H <- (I - rho s yᵀ) H (I - rho y sᵀ) + rho s sᵀ`
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64, n: usize) {
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y, n);
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (s[i] * hy[j] + hy[i] * s[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl() {
        let r = quasi_newton_minimize(|x| x[0] * x[0] + x[1] * x[1], &[3.0, -4.0], 1e-8).unwrap();
        assert!(r.converged);
        assert!(r.argmin.iter().all(|v| v.abs() < 1e-6), "{:?}", r.argmin);
    }

    #[test]
    fn rosenbrock_from_standard_start() {
        let rosen = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = quasi_newton_minimize(rosen, &[-1.2, 1.0], 1e-7).unwrap();
        assert!((r.argmin[0] - 1.0).abs() < 1e-4 && (r.argmin[1] - 1.0).abs() < 1e-4, "{r:?}");
    }

    #[test]
    fn analytic_gradient_path() {
        let fg = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * (x[0] - 1.0);
            g[1] = 8.0 * (x[1] + 2.0);
            (x[0] - 1.0).powi(2) + 4.0 * (x[1] + 2.0).powi(2)
        };
        let r = quasi_newton_minimize_with_gradient(fg, &[0.0, 0.0], &QuasiNewtonOptions::default()).unwrap();
        assert!((r.argmin[0] - 1.0).abs() < 1e-7 && (r.argmin[1] + 2.0).abs() < 1e-7);
        assert!(r.converged && r.gradient_norm <= 1e-6);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        assert!(matches!(
            quasi_newton_minimize(|_| f64::NAN, &[0.0], 1e-6),
            Err(Error::LineSearch(_))
        ));
    }

    #[test]
    fn non_finite_everywhere_else_is_an_error() {
        let f = |x: &[f64]| if x[0] == 1.0 { x[0] } else { f64::INFINITY };
        assert!(matches!(quasi_newton_minimize(f, &[1.0], 1e-9), Err(_)));
    }

    #[test]
    fn iteration_cap_flags_non_convergence() {
        let opts = QuasiNewtonOptions {
            tolerance: 1e-12,
            max_iterations: 2,
        };
        let rosen = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = minimize(&mut ValueOnly(rosen), &[-1.2, 1.0], &opts).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 2);
        assert!(r.objective < 24.2);
    }

    #[test]
    fn finite_differences_match_analytic_derivative() {
        let f = |x: &[f64]| x[0].sin() * x[1].exp();
        let x = [0.7, -0.3];
        let g = central_difference_gradient(f, &x);
        let exact = [0.7f64.cos() * (-0.3f64).exp(), 0.7f64.sin() * (-0.3f64).exp()];
        for i in 0..2 {
            assert!((g[i] - exact[i]).abs() < 1e-8 * (1.0 + exact[i].abs()));
        }
    }
}
