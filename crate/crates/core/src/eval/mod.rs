//! Evaluation datasets, metrics, repeated experiments and reports.

mod ablation;
mod conformal;
mod dataset;
mod metrics;
mod report;

use thiserror::Error;

use crate::llm::LlmError;
use crate::pipeline::{CodingQuery, DecisionRecord, Method, Pipeline};
use crate::terminology::Terminology;

pub use ablation::{ablation_report, attribute, AblationReport};
pub use conformal::{attach_conformal_set, calibration_examples};
pub use dataset::{build_eval_dataset, pareto_split, read_raw_records, EvalItem, ParetoSplit, RawCodedRecord};
pub use metrics::{
    accuracy_at_level, align_decisions, curve_records, group_by_seed, is_correct, is_covered,
    metrics_report, set_coverage_at_level, EvalSettings, MeanStd, MetricsReport, Split,
    SplitMetrics,
};
pub use report::{
    csv_header, emit_report, render_ablation, render_report, write_text, ReportFormat,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no decision for query id(s): {}", .0.join(", "))]
    MissingDecision(Vec<String>),
    #[error("unknown level `{0}`")]
    UnknownLevel(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("cost: {0}")]
    Cost(#[from] LlmError),
    #[error("io: {0}")]
    Io(String),
}

/// Anything that turns queries into decisions for a given method and seed.
pub trait Coder: Sync {
    fn code_batch(&self, method: Method, queries: &[CodingQuery], seed: u64) -> Vec<DecisionRecord>;
}

impl Coder for Pipeline {
    fn code_batch(&self, method: Method, queries: &[CodingQuery], seed: u64) -> Vec<DecisionRecord> {
        self.run_batch(method, queries, seed)
    }
}

/// Runs `method` once per seed and aggregates the metrics. Per-query
/// failures are counted, never fatal.
pub fn run_experiment(
    coder: &dyn Coder,
    method: Method,
    items: &[EvalItem],
    seeds: &[u64],
    terminology: &Terminology,
    settings: &EvalSettings,
) -> Result<(MetricsReport, Vec<(u64, Vec<DecisionRecord>)>), EvalError> {
    if seeds.is_empty() {
        return Err(EvalError::EmptyInput("seeds".into()));
    }
    let queries: Vec<CodingQuery> = items.iter().map(|i| i.query.clone()).collect();
    let runs: Vec<(u64, Vec<DecisionRecord>)> = seeds
        .iter()
        .map(|&seed| (seed, coder.code_batch(method, &queries, seed)))
        .collect();
    let report = metrics_report(&runs, items, terminology, settings)?;
    Ok((report, runs))
}
