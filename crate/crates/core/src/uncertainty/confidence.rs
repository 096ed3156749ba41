use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::UncertaintyError;

/// Normalized answer distribution over option labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceDistribution {
    pub probs: BTreeMap<String, f64>,
    pub temperature: f64,
}

impl ConfidenceDistribution {
    pub fn probability(&self, label: &str) -> Option<f64> {
        self.probs.get(label).copied()
    }

    /// Highest-probability label; ties go to the smallest label.
    pub fn argmax(&self) -> Option<&str> {
        let mut best: Option<(&str, f64)> = None;
        for (label, &p) in &self.probs {
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((label.as_str(), p));
            }
        }
        best.map(|(l, _)| l)
    }

    pub fn one_hot(labels: impl IntoIterator<Item = String>, hot: &str) -> Self {
        let probs = labels
            .into_iter()
            .map(|l| {
                let p = if l == hot { 1.0 } else { 0.0 };
                (l, p)
            })
            .collect();
        Self {
            probs,
            temperature: 1.0,
        }
    }
}

/// Temperature-scaled softmax, `p_i = exp(v_i/T) / Σ_j exp(v_j/T)`, computed
/// with max-subtraction.
pub fn softmax_t(
    logvals: &BTreeMap<String, f64>,
    temperature: f64,
) -> Result<ConfidenceDistribution, UncertaintyError> {
    if logvals.is_empty() {
        return Err(UncertaintyError::EmptyInput);
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(UncertaintyError::NonPositiveTemperature(temperature));
    }
    if logvals.values().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(UncertaintyError::NonFiniteInput);
    }
    let max = logvals.values().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(UncertaintyError::NonFiniteInput);
    }
    let exps: Vec<(String, f64)> = logvals
        .iter()
        .map(|(l, v)| (l.clone(), ((v - max) / temperature).exp()))
        .collect();
    let total: f64 = exps.iter().map(|(_, e)| e).sum();
    Ok(ConfidenceDistribution {
        probs: exps.into_iter().map(|(l, e)| (l, e / total)).collect(),
        temperature,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entropy {
    pub nats: f64,
    pub normalized: f64,
}

/// Shannon entropy in nats with `0·ln 0 = 0`; normalized by `ln n` (0 when
/// there is a single label).
pub fn predictive_entropy(dist: &ConfidenceDistribution) -> Entropy {
    entropy_of(dist.probs.values().copied())
}

/// Entropy after dropping `label` and renormalizing the remaining mass.
pub fn predictive_entropy_excluding(dist: &ConfidenceDistribution, label: &str) -> Entropy {
    let kept: Vec<f64> = dist
        .probs
        .iter()
        .filter(|(l, _)| l.as_str() != label)
        .map(|(_, p)| *p)
        .collect();
    let mass: f64 = kept.iter().sum();
    if mass <= 0.0 {
        // Everything sat on the excluded label: maximally unsure among the rest.
        let n = kept.len();
        return Entropy {
            nats: if n >= 2 { (n as f64).ln() } else { 0.0 },
            normalized: if n >= 2 { 1.0 } else { 0.0 },
        };
    }
    entropy_of(kept.into_iter().map(|p| p / mass))
}

fn entropy_of(probs: impl Iterator<Item = f64>) -> Entropy {
    let mut n = 0usize;
    let mut h = 0.0;
    for p in probs {
        n += 1;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    let h = h.max(0.0);
    let normalized = if n >= 2 {
        (h / (n as f64).ln()).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Entropy { nats: h, normalized }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(l, v)| (l.to_string(), *v)).collect()
    }

    #[test]
    fn equal_inputs_uniform() {
        for t in [0.1, 1.0, 7.0] {
            let d = softmax_t(&map(&[("A", 3.0), ("B", 3.0), ("C", 3.0), ("D", 3.0)]), t).unwrap();
            for p in d.probs.values() {
                assert!((p - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_of_normalized_is_identity() {
        let d = softmax_t(
            &map(&[("A", 0.5f64.ln()), ("B", 0.25f64.ln()), ("C", 0.25f64.ln())]),
            1.0,
        )
        .unwrap();
        assert!((d.probs["A"] - 0.5).abs() < 1e-12);
        assert!((d.probs["B"] - 0.25).abs() < 1e-12);
        assert!((d.probs["C"] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn temperature_half() {
        let d = softmax_t(&map(&[("A", 2.0), ("B", 1.0)]), 0.5).unwrap();
        let e4 = 4f64.exp();
        let e2 = 2f64.exp();
        assert!((d.probs["A"] - e4 / (e4 + e2)).abs() < 1e-12);
        assert!((d.probs["B"] - e2 / (e4 + e2)).abs() < 1e-12);
        assert!((d.probs["A"] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn softmax_errors() {
        assert_eq!(
            softmax_t(&BTreeMap::new(), 1.0).unwrap_err(),
            UncertaintyError::EmptyInput
        );
        assert!(matches!(
            softmax_t(&map(&[("A", 1.0)]), 0.0).unwrap_err(),
            UncertaintyError::NonPositiveTemperature(_)
        ));
    }

    #[test]
    fn negative_infinity_gets_zero_mass() {
        let d = softmax_t(&map(&[("A", 0.0), ("B", f64::NEG_INFINITY)]), 1.0).unwrap();
        assert_eq!(d.probs["B"], 0.0);
        assert_eq!(d.probs["A"], 1.0);
    }

    #[test]
    fn entropy_cases() {
        let labels = ["A", "B", "C", "D", "E"].map(String::from);
        let e = predictive_entropy(&ConfidenceDistribution::one_hot(labels, "C"));
        assert_eq!((e.nats, e.normalized), (0.0, 0.0));

        let uniform = ConfidenceDistribution {
            probs: map(&[("A", 0.25), ("B", 0.25), ("C", 0.25), ("D", 0.25)]),
            temperature: 1.0,
        };
        let e = predictive_entropy(&uniform);
        assert!((e.nats - 4f64.ln()).abs() < 1e-12);
        assert!((e.normalized - 1.0).abs() < 1e-12);

        let d = ConfidenceDistribution {
            probs: map(&[("A", 0.7), ("B", 0.2), ("C", 0.1)]),
            temperature: 1.0,
        };
        let hand = -(0.7f64 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        let e = predictive_entropy(&d);
        assert!((e.nats - hand).abs() < 1e-12);
        assert!((e.nats - 0.80182).abs() < 1e-5);
    }

    #[test]
    fn single_label_normalizes_to_zero() {
        let d = ConfidenceDistribution {
            probs: map(&[("A", 1.0)]),
            temperature: 1.0,
        };
        assert_eq!(predictive_entropy(&d).normalized, 0.0);
    }

    #[test]
    fn excluding_none_renormalizes() {
        let d = ConfidenceDistribution {
            probs: map(&[("A", 0.4), ("B", 0.4), ("C", 0.2)]),
            temperature: 1.0,
        };
        let e = predictive_entropy_excluding(&d, "C");
        assert!((e.normalized - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_to_smallest_label() {
        let d = ConfidenceDistribution {
            probs: map(&[("A", 0.4), ("B", 0.4), ("C", 0.2)]),
            temperature: 1.0,
        };
        assert_eq!(d.argmax(), Some("A"));
    }
}
