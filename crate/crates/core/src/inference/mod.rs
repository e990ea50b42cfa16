//! Cluster bootstrap, the joint parallel-trend test and the fixed-effects table.

mod bootstrap;
mod table;
mod wilks;

pub use bootstrap::{
    cluster_bootstrap, cluster_bootstrap_fit, normal_p_value, quantile_sorted, resampling_indices, BootstrapResult,
    BootstrapTerm, MAX_FAILED_SHARE, MIN_REPLICATES,
};
pub use table::{coefficient_table, significance_stars, CoefficientTable, TableCell};
pub use wilks::{rao_f, wilks_parallel_trend_test, wilks_test, JointTestResult};
