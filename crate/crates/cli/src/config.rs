//! TOML configuration. Relative paths resolve against the config file's
//! directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use codealign::llm::{PriceTable, RetryPolicy};
use codealign::pipeline::PipelineConfig;
use codealign::terminology::TerminologySpec;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(rename = "terminology")]
    pub terminologies: Vec<TerminologyConfig>,
    #[serde(default)]
    pub index: IndexConfig,
    pub provider: ProviderConfig,
    /// USD per 1k tokens, keyed by provider id.
    #[serde(default)]
    pub prices: PriceTable,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub service: ServiceConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Atc,
    Meddra,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminologyConfig {
    pub path: PathBuf,
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub spec: Option<TerminologySpec>,
}

impl TerminologyConfig {
    pub fn spec(&self) -> Result<TerminologySpec, CliError> {
        match (&self.preset, &self.spec) {
            (Some(Preset::Atc), None) => Ok(TerminologySpec::atc()),
            (Some(Preset::Meddra), None) => Ok(TerminologySpec::meddra()),
            (None, Some(spec)) => Ok(spec.clone()),
            _ => Err(CliError::Config(format!(
                "terminology {}: give exactly one of `preset` or `spec`",
                self.path.display()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Hash,
    Http,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexConfig {
    #[serde(default = "default_index_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_dimension")]
    pub embedding_dimension: usize,
    #[serde(default = "default_embedder")]
    pub embedder: EmbedderKind,
    #[serde(default)]
    pub embedding_endpoint: Option<String>,
    #[serde(default)]
    pub embedding_model: Option<String>,
}

fn default_index_dir() -> PathBuf {
    PathBuf::from("index")
}

fn default_dimension() -> usize {
    256
}

fn default_embedder() -> EmbedderKind {
    EmbedderKind::Hash
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            dir: default_index_dir(),
            embedding_dimension: default_dimension(),
            embedder: default_embedder(),
            embedding_endpoint: None,
            embedding_model: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// Serves recorded responses from a replay store; never calls out.
    Replay,
    /// OpenAI-compatible chat completions endpoint.
    Http,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Used for caching and pricing.
    pub id: String,
    #[serde(default)]
    pub replay_path: Option<PathBuf>,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub token_ids: BTreeMap<String, u32>,
    #[serde(default = "default_true")]
    pub supports_logit_bias: bool,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Persistent response cache, in replay-store format.
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_true() -> bool {
    true
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_pareto")]
    pub pareto_fraction: f64,
    /// Levels reported; defaults to every level of the terminology.
    #[serde(default)]
    pub levels: Option<Vec<String>>,
    #[serde(default = "default_fractions")]
    pub curve_fractions: Vec<f64>,
    #[serde(default = "default_random_repeats")]
    pub random_repeats: u32,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_pareto() -> f64 {
    0.8
}

fn default_fractions() -> Vec<f64> {
    (0..=10).map(|i| i as f64 * 0.05).collect()
}

fn default_random_repeats() -> u32 {
    10
}

fn default_alpha() -> f64 {
    0.1
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            seeds: default_seeds(),
            pareto_fraction: default_pareto(),
            levels: None,
            curve_fractions: default_fractions(),
            random_repeats: default_random_repeats(),
            alpha: default_alpha(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default = "default_journal")]
    pub journal: PathBuf,
}

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

fn default_journal() -> PathBuf {
    PathBuf::from("review_journal.jsonl")
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: default_bind(),
            journal: default_journal(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn parent_exists(p: &Path) -> bool {
    match p.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.is_dir(),
        _ => true,
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut config: Config = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for t in &mut self.terminologies {
            resolve(base, &mut t.path);
        }
        resolve(base, &mut self.index.dir);
        for p in [&mut self.provider.replay_path, &mut self.provider.cache_path]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
        resolve(base, &mut self.service.journal);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.terminologies.is_empty() {
            return bad("at least one [[terminology]] is required".into());
        }
        for t in &self.terminologies {
            t.spec()?;
            if !t.path.is_file() {
                return bad(format!("terminology file {} does not exist", t.path.display()));
            }
        }
        if self.index.embedding_dimension == 0 {
            return bad("index.embedding_dimension must be positive".into());
        }
        if self.index.embedder == EmbedderKind::Http
            && (self.index.embedding_endpoint.is_none() || self.index.embedding_model.is_none())
        {
            return bad("http embedder needs index.embedding_endpoint and index.embedding_model".into());
        }
        match self.provider.kind {
            ProviderKind::Replay => match &self.provider.replay_path {
                Some(p) if p.is_file() => {}
                Some(p) => return bad(format!("replay store {} does not exist", p.display())),
                None => return bad("replay provider needs provider.replay_path".into()),
            },
            ProviderKind::Http => {
                if self.provider.endpoint.is_none() || self.provider.model.is_none() {
                    return bad("http provider needs provider.endpoint and provider.model".into());
                }
            }
        }
        if self.provider.id.trim().is_empty() {
            return bad("provider.id is empty".into());
        }
        if let Some(p) = &self.provider.cache_path {
            if !parent_exists(p) {
                return bad(format!("directory for cache {} does not exist", p.display()));
            }
        }
        if !parent_exists(&self.service.journal) {
            return bad(format!(
                "directory for journal {} does not exist",
                self.service.journal.display()
            ));
        }
        self.prices.validate().map_err(CliError::Config)?;
        self.pipeline.validate().map_err(CliError::Config)?;
        let e = &self.evaluation;
        if e.seeds.is_empty() {
            return bad("evaluation.seeds is empty".into());
        }
        if !(e.pareto_fraction > 0.0 && e.pareto_fraction <= 1.0) {
            return bad(format!("evaluation.pareto_fraction {} not in (0, 1]", e.pareto_fraction));
        }
        if e.curve_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("evaluation.curve_fractions must lie in [0, 1]".into());
        }
        if !(e.alpha > 0.0 && e.alpha < 1.0) {
            return bad(format!("evaluation.alpha {} not in (0, 1)", e.alpha));
        }
        Ok(())
    }
}
