//! Deferral policies and the accuracy-vs-deferral simulation.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::UncertaintyError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum DeferralPolicy {
    /// Defer the `⌈fraction·N⌉` most uncertain records.
    EntropyBudget { budget_fraction: f64 },
    /// Defer every record whose normalized entropy exceeds `threshold`.
    EntropyThreshold { threshold: f64 },
    /// Defer a seeded uniform sample of `⌈fraction·N⌉` records.
    RandomBudget { budget_fraction: f64, seed: u64 },
}

impl DeferralPolicy {
    pub fn validate(&self) -> Result<(), UncertaintyError> {
        match *self {
            DeferralPolicy::EntropyBudget { budget_fraction }
            | DeferralPolicy::RandomBudget {
                budget_fraction, ..
            } if !(0.0..=1.0).contains(&budget_fraction) => Err(
                UncertaintyError::InvalidPolicy(format!("budget_fraction {budget_fraction} not in [0,1]")),
            ),
            DeferralPolicy::EntropyThreshold { threshold } if threshold.is_nan() => {
                Err(UncertaintyError::InvalidPolicy("threshold is NaN".into()))
            }
            _ => Ok(()),
        }
    }
}

/// `⌈fraction·n⌉`, tolerant of representation error in `fraction`.
pub fn budget_count(fraction: f64, n: usize) -> usize {
    let exact = fraction * n as f64;
    let count = (exact - 1e-9).ceil().max(0.0) as usize;
    count.min(n)
}

/// Ids ordered most-uncertain first; ties by id ascending.
fn by_entropy_desc<'a>(records: &'a [(String, f64)]) -> Vec<&'a (String, f64)> {
    let mut sorted: Vec<&(String, f64)> = records.iter().collect();
    sorted.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    sorted
}

pub fn select_deferrals(records: &[(String, f64)], policy: &DeferralPolicy) -> BTreeSet<String> {
    match *policy {
        DeferralPolicy::EntropyBudget { budget_fraction } => {
            let n = budget_count(budget_fraction, records.len());
            by_entropy_desc(records)
                .into_iter()
                .take(n)
                .map(|(id, _)| id.clone())
                .collect()
        }
        DeferralPolicy::EntropyThreshold { threshold } => records
            .iter()
            .filter(|(_, h)| *h > threshold)
            .map(|(id, _)| id.clone())
            .collect(),
        DeferralPolicy::RandomBudget {
            budget_fraction,
            seed,
        } => {
            let n = budget_count(budget_fraction, records.len());
            let mut ids: Vec<&String> = records.iter().map(|(id, _)| id).collect();
            ids.sort();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, ids.len(), n)
                .into_iter()
                .map(|i| ids[i].clone())
                .collect()
        }
    }
}

/// One record's input to the deferral simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub record_id: String,
    pub normalized_entropy: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CurvePolicy {
    EntropyBudget,
    RandomBudget,
}

impl CurvePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            CurvePolicy::EntropyBudget => "ENTROPY_BUDGET",
            CurvePolicy::RandomBudget => "RANDOM_BUDGET",
        }
    }
}

/// One row of the curve CSV (`fraction,accuracy,policy,repeat`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub fraction: f64,
    pub accuracy: f64,
    pub policy: CurvePolicy,
    pub repeat: u32,
}

/// Accuracy when deferred records are assumed to be corrected by a reviewer.
pub fn accuracy_with_deferrals(records: &[CurveRecord], deferred: &BTreeSet<String>) -> f64 {
    if records.is_empty() {
        return 1.0;
    }
    let good = records
        .iter()
        .filter(|r| r.correct || deferred.contains(&r.record_id))
        .count();
    good as f64 / records.len() as f64
}

/// Per-repeat curve rows. Entropy policies produce a single repeat (0); the
/// random policy produces `random_repeats` rows per fraction seeded
/// `base_seed + repeat`.
pub fn simulate_deferral_runs(
    records: &[CurveRecord],
    fractions: &[f64],
    policy: CurvePolicy,
    random_repeats: u32,
    base_seed: u64,
) -> Vec<CurveRow> {
    let entropies: Vec<(String, f64)> = records
        .iter()
        .map(|r| (r.record_id.clone(), r.normalized_entropy))
        .collect();
    let mut rows = Vec::new();
    for &fraction in fractions {
        match policy {
            CurvePolicy::EntropyBudget => {
                let deferred = select_deferrals(
                    &entropies,
                    &DeferralPolicy::EntropyBudget {
                        budget_fraction: fraction,
                    },
                );
                rows.push(CurveRow {
                    fraction,
                    accuracy: accuracy_with_deferrals(records, &deferred),
                    policy,
                    repeat: 0,
                });
            }
            CurvePolicy::RandomBudget => {
                for repeat in 0..random_repeats.max(1) {
                    let deferred = select_deferrals(
                        &entropies,
                        &DeferralPolicy::RandomBudget {
                            budget_fraction: fraction,
                            seed: base_seed + repeat as u64,
                        },
                    );
                    rows.push(CurveRow {
                        fraction,
                        accuracy: accuracy_with_deferrals(records, &deferred),
                        policy,
                        repeat,
                    });
                }
            }
        }
    }
    rows
}

/// `(fraction, accuracy)` points, averaging random repeats.
pub fn simulate_deferral_curve(
    records: &[CurveRecord],
    fractions: &[f64],
    policy: CurvePolicy,
    random_repeats: u32,
    base_seed: u64,
) -> Vec<(f64, f64)> {
    let rows = simulate_deferral_runs(records, fractions, policy, random_repeats, base_seed);
    fractions
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            // Rows are grouped per fraction in input order.
            let per = rows.len() / fractions.len();
            let group = &rows[i * per..(i + 1) * per];
            let mean = group.iter().map(|r| r.accuracy).sum::<f64>() / group.len() as f64;
            (f, mean)
        })
        .collect()
}

pub fn write_curve_csv<W: std::io::Write>(sink: W, rows: &[CurveRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["fraction", "accuracy", "policy", "repeat"])?;
    for r in rows {
        w.write_record([
            format!("{:.4}", r.fraction),
            format!("{:.6}", r.accuracy),
            r.policy.as_str().to_string(),
            r.repeat.to_string(),
        ])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ents() -> Vec<(String, f64)> {
        vec![("r1".into(), 0.9), ("r2".into(), 0.1), ("r3".into(), 0.5)]
    }

    #[test]
    fn budget_extremes() {
        let none = select_deferrals(&ents(), &DeferralPolicy::EntropyBudget { budget_fraction: 0.0 });
        assert!(none.is_empty());
        let all = select_deferrals(&ents(), &DeferralPolicy::EntropyBudget { budget_fraction: 1.0 });
        assert_eq!(all.len(), 3);
    }

    #[test]
    fn third_budget_takes_highest() {
        let got = select_deferrals(
            &ents(),
            &DeferralPolicy::EntropyBudget {
                budget_fraction: 1.0 / 3.0,
            },
        );
        assert_eq!(got, BTreeSet::from(["r1".to_string()]));
    }

    #[test]
    fn budget_ties_by_id() {
        let recs = vec![("b".to_string(), 0.5), ("a".to_string(), 0.5), ("c".to_string(), 0.5)];
        let got = select_deferrals(&recs, &DeferralPolicy::EntropyBudget { budget_fraction: 0.5 });
        assert_eq!(got, BTreeSet::from(["a".to_string(), "b".to_string()]));
    }

    #[test]
    fn threshold_is_strict() {
        let got = select_deferrals(&ents(), &DeferralPolicy::EntropyThreshold { threshold: 0.5 });
        assert_eq!(got, BTreeSet::from(["r1".to_string()]));
    }

    #[test]
    fn random_is_seeded() {
        let recs: Vec<(String, f64)> = (0..50).map(|i| (format!("r{i:02}"), 0.0)).collect();
        let p = DeferralPolicy::RandomBudget {
            budget_fraction: 0.2,
            seed: 7,
        };
        let a = select_deferrals(&recs, &p);
        assert_eq!(a.len(), 10);
        assert_eq!(a, select_deferrals(&recs, &p));
        let mut reversed = recs.clone();
        reversed.reverse();
        assert_eq!(a, select_deferrals(&reversed, &p));
    }

    #[test]
    fn budget_count_rounds_up() {
        assert_eq!(budget_count(0.3, 200), 60);
        assert_eq!(budget_count(0.01, 10), 1);
        assert_eq!(budget_count(1.0, 7), 7);
        assert_eq!(budget_count(0.0, 7), 0);
    }

    fn fixture() -> Vec<CurveRecord> {
        // Four records, the single incorrect one is the most uncertain.
        vec![
            CurveRecord { record_id: "a".into(), normalized_entropy: 0.1, correct: true },
            CurveRecord { record_id: "b".into(), normalized_entropy: 0.2, correct: true },
            CurveRecord { record_id: "c".into(), normalized_entropy: 0.9, correct: false },
            CurveRecord { record_id: "d".into(), normalized_entropy: 0.3, correct: true },
        ]
    }

    #[test]
    fn curve_endpoints() {
        let curve = simulate_deferral_curve(&fixture(), &[0.0, 0.25, 1.0], CurvePolicy::EntropyBudget, 1, 0);
        assert_eq!(curve, vec![(0.0, 0.75), (0.25, 1.0), (1.0, 1.0)]);
        let random = simulate_deferral_curve(&fixture(), &[0.0, 1.0], CurvePolicy::RandomBudget, 5, 0);
        assert_eq!(random, vec![(0.0, 0.75), (1.0, 1.0)]);
    }

    #[test]
    fn curve_csv_shape() {
        let rows = simulate_deferral_runs(&fixture(), &[0.5], CurvePolicy::RandomBudget, 2, 0);
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "fraction,accuracy,policy,repeat");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].ends_with(",RANDOM_BUDGET,1"));
    }

    #[test]
    fn policy_json_shape() {
        let p: DeferralPolicy =
            serde_json::from_str(r#"{"kind":"RANDOM_BUDGET","budget_fraction":0.1,"seed":3}"#).unwrap();
        assert_eq!(p, DeferralPolicy::RandomBudget { budget_fraction: 0.1, seed: 3 });
        let bad: Result<DeferralPolicy, _> =
            serde_json::from_str(r#"{"kind":"ENTROPY_THRESHOLD","threshold":0.1,"seed":3}"#);
        assert!(bad.is_err());
    }
}
