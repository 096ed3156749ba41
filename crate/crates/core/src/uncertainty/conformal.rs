//! Split conformal prediction over answer distributions.
//!
//! Nonconformity of a labelled calibration example is `1 − p(gold)`. The
//! threshold `q̂` is the `⌈(n+1)(1−α)⌉`-th smallest score, and a test
//! prediction set keeps every label with `p ≥ 1 − q̂`, which covers the true
//! label with probability at least `1 − α` under exchangeability.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{ConfidenceDistribution, UncertaintyError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibrator {
    pub alpha: f64,
    pub scores: Vec<f64>,
    pub q_hat: f64,
}

/// 1-based rank of the calibration quantile; may exceed `n`.
pub fn quantile_rank(n: usize, alpha: f64) -> usize {
    ((n as f64 + 1.0) * (1.0 - alpha) - 1e-9).ceil().max(1.0) as usize
}

pub fn conformal_calibrate(
    calibration: &[(ConfidenceDistribution, String)],
    alpha: f64,
) -> Result<ConformalCalibrator, UncertaintyError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(UncertaintyError::InvalidAlpha(alpha));
    }
    if calibration.is_empty() {
        return Err(UncertaintyError::EmptyInput);
    }
    let mut scores = Vec::with_capacity(calibration.len());
    for (index, (dist, gold)) in calibration.iter().enumerate() {
        let p = dist
            .probability(gold)
            .ok_or_else(|| UncertaintyError::GoldLabelMissing {
                index,
                label: gold.clone(),
            })?;
        scores.push((1.0 - p).clamp(0.0, 1.0));
    }
    Ok(from_scores(scores, alpha))
}

pub(crate) fn from_scores(scores: Vec<f64>, alpha: f64) -> ConformalCalibrator {
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let rank = quantile_rank(sorted.len(), alpha);
    let q_hat = if rank > sorted.len() {
        1.0
    } else {
        sorted[rank - 1]
    };
    ConformalCalibrator {
        alpha,
        scores,
        q_hat,
    }
}

/// Labels with `p ≥ 1 − q̂`, evaluated as `1 − p ≤ q̂` so the rule matches
/// the score computation exactly.
pub fn conformal_set(dist: &ConfidenceDistribution, cal: &ConformalCalibrator) -> BTreeSet<String> {
    dist.probs
        .iter()
        .filter(|(_, p)| 1.0 - **p <= cal.q_hat)
        .map(|(l, _)| l.clone())
        .collect()
}
