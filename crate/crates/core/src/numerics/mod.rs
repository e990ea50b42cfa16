//! Dense linear algebra, logistic IRLS and quasi-Newton minimization shared by
//! the estimation stages.

mod irls;
mod matrix;
mod optim;

pub use irls::{
    bernoulli_loglik, inv_logit, irls_fit, irls_fit_with, log1p_exp, logit, IrlsFit, IrlsOptions,
    SEPARATION_BOUND,
};
pub use matrix::{cholesky_solve, dot, norm2, norm_inf, spd_inverse, Cholesky, DenseMatrix};
pub use optim::{
    central_difference_gradient, central_difference_gradient_into, minimize, minimize_from, quasi_newton_minimize,
    quasi_newton_minimize_with_gradient, Objective, OptimResult, QuasiNewtonOptions,
    FD_RELATIVE_STEP,
};
