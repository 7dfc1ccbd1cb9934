//! Exact enumeration of tiny instances and diagnostics for gradient
//! estimators and training curves.

mod enumerate;
mod estimators;
mod statistics;

pub use enumerate::{enumerate_exact, sequence_count, EnumerationResult, MAX_ENUMERATED};
pub use estimators::{
    bias_variance_sweep, estimator_stats, monte_carlo_reward, Estimator, EstimatorProblem, EstimatorReport,
};
pub use statistics::{stability_metric, welch_ttest, TTestResult};
