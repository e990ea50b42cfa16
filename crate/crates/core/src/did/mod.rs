//! Second stage: difference-in-differences regression on the risk-adjusted panel.

mod coefficients;
pub(crate) mod design;
mod mixed;

pub use coefficients::{
    extract_did_coefficients, reported_terms, reported_values, term_value, DidCoefficients, DidRow,
};
pub use design::{
    build_design, build_design_with, did_column, level_did_column, year_column, CellProfile, DesignLayout,
    DesignOptions, DidDesign, InteractionScheme, INTERCEPT, MONTH, TREATED,
};
pub use mixed::{
    fit_mixed_data, fit_mixed_data_from, fit_multivariate_mixed, fit_multivariate_mixed_with, HospitalEffects, MixedData,
    MixedEstimate, MixedOptions, MultivariateMixedFit, SigmaStructure,
};
