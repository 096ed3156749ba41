use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::dataset::{pareto_split, EvalItem};
use super::EvalError;
use crate::llm::{cost_of, PriceTable, UsageEntry};
use crate::pipeline::{DecisionRecord, Method};
use crate::terminology::Terminology;
use crate::uncertainty::CurveRecord;

/// Pairs each item with its decision, failing with every unmatched id.
pub fn align_decisions<'a>(
    decisions: &'a [DecisionRecord],
    items: &'a [EvalItem],
) -> Result<Vec<(&'a EvalItem, &'a DecisionRecord)>, EvalError> {
    let by_id: BTreeMap<&str, &DecisionRecord> =
        decisions.iter().map(|d| (d.record_id(), d)).collect();
    let mut missing = Vec::new();
    let mut pairs = Vec::with_capacity(items.len());
    for item in items {
        match by_id.get(item.query.query_id.as_str()) {
            Some(d) => pairs.push((item, *d)),
            None => missing.push(item.query.query_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(EvalError::MissingDecision(missing));
    }
    Ok(pairs)
}

fn at_level(terminology: &Terminology, code: &str, level: &str) -> Option<String> {
    terminology.resolve_at_level(code, level).ok()
}

/// Whether the decision's effective code matches gold at `level`.
pub fn is_correct(
    terminology: &Terminology,
    decision: &DecisionRecord,
    gold: &str,
    level: &str,
) -> bool {
    let Some(code) = decision.effective_code() else {
        return false;
    };
    match (at_level(terminology, code, level), at_level(terminology, gold, level)) {
        (Some(a), Some(b)) => a == b,
        _ => false,
    }
}

/// Whether gold appears, at `level`, among the prediction-set codes or the
/// effective code.
pub fn is_covered(
    terminology: &Terminology,
    decision: &DecisionRecord,
    gold: &str,
    level: &str,
) -> bool {
    let Some(gold) = at_level(terminology, gold, level) else {
        return false;
    };
    decision
        .prediction_set
        .iter()
        .map(|e| e.code.as_str())
        .chain(decision.effective_code())
        .any(|c| at_level(terminology, c, level).as_deref() == Some(gold.as_str()))
}

fn fraction(
    decisions: &[DecisionRecord],
    items: &[EvalItem],
    hit: impl Fn(&DecisionRecord, &EvalItem) -> bool,
) -> Result<f64, EvalError> {
    let pairs = align_decisions(decisions, items)?;
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let n = pairs.iter().filter(|(i, d)| hit(d, i)).count();
    Ok(n as f64 / pairs.len() as f64)
}

pub fn accuracy_at_level(
    decisions: &[DecisionRecord],
    items: &[EvalItem],
    terminology: &Terminology,
    level: &str,
) -> Result<f64, EvalError> {
    check_level(terminology, level)?;
    fraction(decisions, items, |d, i| is_correct(terminology, d, &i.gold_code, level))
}

pub fn set_coverage_at_level(
    decisions: &[DecisionRecord],
    items: &[EvalItem],
    terminology: &Terminology,
    level: &str,
) -> Result<f64, EvalError> {
    check_level(terminology, level)?;
    fraction(decisions, items, |d, i| is_covered(terminology, d, &i.gold_code, level))
}

fn check_level(terminology: &Terminology, level: &str) -> Result<(), EvalError> {
    match terminology.spec().level_index(level) {
        Some(_) => Ok(()),
        None => Err(EvalError::UnknownLevel(level.to_string())),
    }
}

/// Correctness at `level` plus normalized entropy, as input to deferral
/// simulation. Records without an entropy count as maximally uncertain.
pub fn curve_records(
    decisions: &[DecisionRecord],
    items: &[EvalItem],
    terminology: &Terminology,
    level: &str,
) -> Result<Vec<CurveRecord>, EvalError> {
    check_level(terminology, level)?;
    Ok(align_decisions(decisions, items)?
        .into_iter()
        .map(|(item, d)| CurveRecord {
            record_id: d.record_id().to_string(),
            normalized_entropy: d.normalized_entropy.unwrap_or(1.0),
            correct: is_correct(terminology, d, &item.gold_code, level),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation; a single value has std 0.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Overall,
    Common,
    Uncommon,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Overall, Split::Common, Split::Uncommon];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Overall => "overall",
            Split::Common => "common",
            Split::Uncommon => "uncommon",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub n_items: usize,
    /// Absent for an empty split.
    pub accuracy: BTreeMap<String, Option<MeanStd>>,
    pub set_coverage: BTreeMap<String, Option<MeanStd>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: Option<Method>,
    pub levels: Vec<String>,
    pub n_repeats: usize,
    pub seeds: Vec<u64>,
    pub splits: BTreeMap<Split, SplitMetrics>,
    /// Records carrying an `error`, summed over repeats.
    pub error_count: usize,
    pub cost_usd_total: f64,
    pub cost_usd_per_code: f64,
}

/// Evaluation settings shared by [`metrics_report`] and the experiment runner.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub levels: Vec<String>,
    pub pareto_fraction: f64,
    pub prices: PriceTable,
}

/// Aggregates per-repeat metrics over `runs` (one decision batch per seed).
pub fn metrics_report(
    runs: &[(u64, Vec<DecisionRecord>)],
    items: &[EvalItem],
    terminology: &Terminology,
    settings: &EvalSettings,
) -> Result<MetricsReport, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::EmptyInput("decision runs".into()));
    }
    for level in &settings.levels {
        check_level(terminology, level)?;
    }
    let split = pareto_split(items, settings.pareto_fraction);
    let subset = |ids: &[String]| -> Vec<EvalItem> {
        let keep: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        items
            .iter()
            .filter(|i| keep.contains(i.query.query_id.as_str()))
            .cloned()
            .collect()
    };
    let parts: [(Split, Vec<EvalItem>); 3] = [
        (Split::Overall, items.to_vec()),
        (Split::Common, subset(&split.common)),
        (Split::Uncommon, subset(&split.uncommon)),
    ];

    let mut splits = BTreeMap::new();
    for (name, part) in &parts {
        let mut accuracy = BTreeMap::new();
        let mut set_coverage = BTreeMap::new();
        for level in &settings.levels {
            let mut acc = Vec::new();
            let mut cov = Vec::new();
            if !part.is_empty() {
                for (_, decisions) in runs {
                    acc.push(accuracy_at_level(decisions, part, terminology, level)?);
                    cov.push(set_coverage_at_level(decisions, part, terminology, level)?);
                }
            }
            accuracy.insert(level.clone(), MeanStd::of(&acc));
            set_coverage.insert(level.clone(), MeanStd::of(&cov));
        }
        splits.insert(
            *name,
            SplitMetrics {
                n_items: part.len(),
                accuracy,
                set_coverage,
            },
        );
    }

    let ledger: Vec<UsageEntry> = runs
        .iter()
        .flat_map(|(_, ds)| ds.iter().flat_map(|d| d.usage.iter().cloned()))
        .collect();
    let cost_usd_total = cost_of(&ledger, &settings.prices)?;
    let codes = items.len() * runs.len();
    let methods: BTreeSet<Method> = runs.iter().flat_map(|(_, ds)| ds.iter().map(|d| d.method)).collect();
    Ok(MetricsReport {
        method: (methods.len() == 1).then(|| *methods.iter().next().expect("one method")),
        levels: settings.levels.clone(),
        n_repeats: runs.len(),
        seeds: runs.iter().map(|(s, _)| *s).collect(),
        splits,
        error_count: runs
            .iter()
            .map(|(_, ds)| ds.iter().filter(|d| d.error.is_some()).count())
            .sum(),
        cost_usd_total,
        cost_usd_per_code: if codes == 0 {
            0.0
        } else {
            cost_usd_total / codes as f64
        },
    })
}

/// Splits a decisions file into per-seed runs, in seed order.
pub fn group_by_seed(decisions: Vec<DecisionRecord>) -> Vec<(u64, Vec<DecisionRecord>)> {
    let mut runs: BTreeMap<u64, Vec<DecisionRecord>> = BTreeMap::new();
    for d in decisions {
        runs.entry(d.seed).or_default().push(d);
    }
    runs.into_iter().collect()
}
