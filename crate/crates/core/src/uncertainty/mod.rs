//! Confidence post-processing: temperature softmax, predictive entropy,
//! deferral policies and split conformal prediction. Everything here is pure.

mod confidence;
mod conformal;
mod deferral;

use thiserror::Error;

pub use confidence::{
    predictive_entropy, predictive_entropy_excluding, softmax_t, ConfidenceDistribution, Entropy,
};
pub use conformal::{conformal_calibrate, conformal_set, quantile_rank, ConformalCalibrator};
pub use deferral::{
    accuracy_with_deferrals, budget_count, select_deferrals, simulate_deferral_curve,
    simulate_deferral_runs, write_curve_csv, CurvePolicy, CurveRecord, CurveRow, DeferralPolicy,
};

#[derive(Debug, Error, PartialEq)]
pub enum UncertaintyError {
    #[error("empty input")]
    EmptyInput,
    #[error("temperature must be positive and finite, got {0}")]
    NonPositiveTemperature(f64),
    #[error("log-values must be finite (or -inf) with at least one finite entry")]
    NonFiniteInput,
    #[error("calibration example {index}: gold label `{label}` not in distribution")]
    GoldLabelMissing { index: usize, label: String },
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("invalid deferral policy: {0}")]
    InvalidPolicy(String),
}
