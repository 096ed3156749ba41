//! Per-query orchestration: candidate generation, entailment filtering and
//! multiple-choice confidence scoring, plus the single-prompt baselines.

mod align;
mod baseline;
pub mod parse;
mod record;

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{
    render_prompt, CompletionRequest, CompletionResponse, Gateway, LlmError, PromptError,
    TemplateId, UsageEntry, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE,
};
use crate::retrieval::{
    document_text, embed, Bm25Index, Bm25Params, DenseIndex, EmbeddingProvider, RetrievalError,
};
use crate::terminology::{Terminology, TerminologyError};
use crate::uncertainty::UncertaintyError;

pub use align::{Gathered, McqOutcome};
pub use record::{
    option_label, Candidate, CodingQuery, ConformalMember, DecisionRecord, EntailmentVerdict,
    McqOption, McqSheet, Method, PredictionEntry,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("no terminology loaded for system `{0}`")]
    UnknownSystem(String),
    #[error("provider returned an empty context twice")]
    EmptyContext,
    #[error("no candidates from any channel")]
    AllChannelsEmpty,
    #[error("unparseable entailment verdict for `{code}`: {reply:?}")]
    UnparseableVerdict { code: String, reply: String },
    #[error("unparseable answer: {0:?}")]
    UnparseableAnswer(String),
    #[error("empty {0} reply")]
    EmptyReply(&'static str),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Terminology(#[from] TerminologyError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
}

fn default_softmax_temperature() -> f64 {
    1.0
}
fn default_candidate_cap() -> usize {
    25
}
fn default_retry_limit() -> u32 {
    1
}
fn default_completion_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}
fn default_dense_k() -> usize {
    10
}
fn default_logit_bias() -> f64 {
    100.0
}
fn default_missing_label_logprob() -> f64 {
    -50.0
}
fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Softmax temperature applied to the answer-label log-probabilities.
    #[serde(default = "default_softmax_temperature")]
    pub softmax_temperature: f64,
    #[serde(default = "default_candidate_cap")]
    pub candidate_cap: usize,
    /// Extra attempts on empty or unparseable replies.
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    #[serde(default = "default_completion_temperature")]
    pub completion_temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub bm25: Bm25Params,
    #[serde(default = "default_dense_k")]
    pub dense_k: usize,
    #[serde(default = "default_logit_bias")]
    pub logit_bias: f64,
    /// Log-probability assumed for a label absent from the returned
    /// alternatives.
    #[serde(default = "default_missing_label_logprob")]
    pub missing_label_logprob: f64,
    /// Also ask for codes given the retrieval hits (retrieval-informed
    /// prompt) and add them to the LLM channel.
    #[serde(default)]
    pub use_retrieval_prompt: bool,
    /// Compute entropy over coded options only.
    #[serde(default)]
    pub entropy_exclude_none: bool,
    /// Defer records whose normalized entropy exceeds this value.
    #[serde(default)]
    pub defer_threshold: Option<f64>,
    /// Give baseline records maximal entropy instead of leaving it absent.
    #[serde(default)]
    pub baseline_max_entropy: bool,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            softmax_temperature: default_softmax_temperature(),
            candidate_cap: default_candidate_cap(),
            retry_limit: default_retry_limit(),
            completion_temperature: default_completion_temperature(),
            max_tokens: default_max_tokens(),
            bm25: Bm25Params::default(),
            dense_k: default_dense_k(),
            logit_bias: default_logit_bias(),
            missing_label_logprob: default_missing_label_logprob(),
            use_retrieval_prompt: false,
            entropy_exclude_none: false,
            defer_threshold: None,
            baseline_max_entropy: false,
            parallelism: default_parallelism(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.softmax_temperature > 0.0 && self.softmax_temperature.is_finite()) {
            return Err(format!(
                "softmax_temperature must be positive, got {}",
                self.softmax_temperature
            ));
        }
        if !(1..=25).contains(&self.candidate_cap) {
            return Err(format!(
                "candidate_cap must be within 1..=25, got {}",
                self.candidate_cap
            ));
        }
        if !(0.0..=2.0).contains(&self.completion_temperature) {
            return Err(format!(
                "completion_temperature must be within [0, 2], got {}",
                self.completion_temperature
            ));
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        if self.dense_k == 0 {
            return Err("dense_k must be positive".into());
        }
        if !self.missing_label_logprob.is_finite() {
            return Err("missing_label_logprob must be finite".into());
        }
        if let Some(t) = self.defer_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(format!("defer_threshold must be within [0, 1], got {t}"));
            }
        }
        if self.parallelism == 0 {
            return Err("parallelism must be positive".into());
        }
        self.bm25.validate().map_err(|e| e.to_string())
    }
}

/// A terminology with its sparse and dense indices.
pub struct SystemIndex {
    pub terminology: Arc<Terminology>,
    pub bm25: Bm25Index,
    pub dense: DenseIndex,
    pub embedder: Arc<dyn EmbeddingProvider>,
}

impl SystemIndex {
    pub fn build(
        terminology: Arc<Terminology>,
        embedder: Arc<dyn EmbeddingProvider>,
    ) -> Result<Self, RetrievalError> {
        let docs: Vec<(String, String)> = terminology
            .entries()
            .map(|e| (e.code.clone(), document_text(e)))
            .collect();
        let bm25 = Bm25Index::build(&docs)?;
        let texts: Vec<String> = docs.iter().map(|(_, t)| t.clone()).collect();
        let vectors = embed(embedder.as_ref(), &texts)?;
        let dense = DenseIndex::build(
            embedder.dimension(),
            docs.into_iter().map(|(c, _)| c).zip(vectors).collect(),
        )?;
        Ok(Self {
            terminology,
            bm25,
            dense,
            embedder,
        })
    }

    /// Assembles prebuilt indices, checking that they cover the terminology.
    pub fn from_parts(
        terminology: Arc<Terminology>,
        bm25: Bm25Index,
        dense: DenseIndex,
        embedder: Arc<dyn EmbeddingProvider>,
    ) -> Result<Self, RetrievalError> {
        if dense.dimension() != embedder.dimension() {
            return Err(RetrievalError::DimensionMismatch {
                expected: dense.dimension(),
                actual: embedder.dimension(),
            });
        }
        for code in bm25.codes().iter().chain(dense.entries().iter().map(|e| &e.code)) {
            if !terminology.contains(code) {
                return Err(RetrievalError::Persistence(format!(
                    "index references `{code}`, which the terminology lacks"
                )));
            }
        }
        Ok(Self {
            terminology,
            bm25,
            dense,
            embedder,
        })
    }
}

/// Per-record accumulator for provider usage.
#[derive(Debug, Default)]
pub struct Ledger(Vec<UsageEntry>);

impl Ledger {
    fn add(&mut self, resp: &CompletionResponse) {
        match self.0.iter_mut().find(|e| e.provider_id == resp.provider_id) {
            Some(e) => {
                e.input_tokens += resp.usage.input_tokens;
                e.output_tokens += resp.usage.output_tokens;
            }
            None => self.0.push(UsageEntry {
                provider_id: resp.provider_id.clone(),
                input_tokens: resp.usage.input_tokens,
                output_tokens: resp.usage.output_tokens,
            }),
        }
    }

    pub fn into_entries(self) -> Vec<UsageEntry> {
        self.0
    }
}

pub struct Pipeline {
    systems: BTreeMap<String, Arc<SystemIndex>>,
    gateway: Gateway,
    config: PipelineConfig,
}

impl Pipeline {
    pub fn new(gateway: Gateway, config: PipelineConfig) -> Self {
        Self {
            systems: BTreeMap::new(),
            gateway,
            config,
        }
    }

    pub fn with_system(mut self, index: SystemIndex) -> Self {
        let id = index.terminology.system_id().to_string();
        self.systems.insert(id, Arc::new(index));
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn system(&self, id: &str) -> Result<&SystemIndex, PipelineError> {
        self.systems
            .get(id)
            .map(|s| s.as_ref())
            .ok_or_else(|| PipelineError::UnknownSystem(id.to_string()))
    }

    fn check_query(&self, query: &CodingQuery) -> Result<&SystemIndex, PipelineError> {
        if query.term.trim().is_empty() {
            return Err(PipelineError::InvalidQuery(format!(
                "`{}` has an empty term",
                query.query_id
            )));
        }
        let system = self.system(&query.target_system)?;
        if system
            .terminology
            .spec()
            .level_index(&query.target_level)
            .is_none()
        {
            return Err(PipelineError::InvalidQuery(format!(
                "`{}`: system {} has no level `{}`",
                query.query_id, query.target_system, query.target_level
            )));
        }
        Ok(system)
    }

    fn request(&self, prompt: String, seed: u64) -> CompletionRequest {
        CompletionRequest::user(prompt)
            .with_temperature(self.config.completion_temperature)
            .with_max_tokens(self.config.max_tokens)
            .with_seed(seed)
    }

    /// One completion with usage recorded.
    fn call(
        &self,
        req: &CompletionRequest,
        ledger: &mut Ledger,
    ) -> Result<CompletionResponse, PipelineError> {
        let completion = self.gateway.complete(req)?;
        ledger.add(&completion.response);
        Ok(completion.response)
    }

    /// Renders `template` and asks until `accept` yields a value, making at
    /// most `retry_limit` extra attempts with a perturbed seed.
    fn ask<T>(
        &self,
        template: TemplateId,
        bindings: &BTreeMap<String, String>,
        seed: u64,
        ledger: &mut Ledger,
        accept: impl Fn(&str) -> Option<T>,
    ) -> Result<Result<T, String>, PipelineError> {
        let prompt = render_prompt(template, bindings)?;
        let mut last = String::new();
        for attempt in 0..=self.config.retry_limit {
            let req = self.request(prompt.clone(), attempt_seed(seed, attempt));
            let resp = self.call(&req, ledger)?;
            if let Some(v) = accept(&resp.text) {
                return Ok(Ok(v));
            }
            log::debug!("{template}: rejected reply on attempt {}", attempt + 1);
            last = resp.text;
        }
        Ok(Err(last))
    }

    /// Runs `method` on one query. Failures are reported in the record's
    /// `error` field, and such records are deferred.
    pub fn run(&self, method: Method, query: &CodingQuery, seed: u64) -> DecisionRecord {
        match method {
            Method::Align => self.run_align(query, seed),
            other => self.run_baseline(other, query, seed),
        }
    }

    /// Runs every query with at most `parallelism` in flight; output order
    /// follows input order.
    pub fn run_batch(&self, method: Method, queries: &[CodingQuery], seed: u64) -> Vec<DecisionRecord> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.parallelism)
            .build();
        match pool {
            Ok(pool) => pool.install(|| {
                queries
                    .par_iter()
                    .map(|q| self.run(method, q, seed))
                    .collect()
            }),
            Err(e) => {
                log::warn!("falling back to sequential execution: {e}");
                queries.iter().map(|q| self.run(method, q, seed)).collect()
            }
        }
    }
}

/// Seed for a retry: the first attempt uses `seed` unchanged.
fn attempt_seed(seed: u64, attempt: u32) -> u64 {
    seed ^ (u64::from(attempt) << 32)
}

fn bindings<const N: usize>(pairs: [(&str, String); N]) -> BTreeMap<String, String> {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}
