//! Loading terminologies, indices, providers and labelled data from config.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use codealign::eval::{build_eval_dataset, read_raw_records, EvalItem};
use codealign::jsonl::read_jsonl_path;
use codealign::llm::{Gateway, HttpProvider, HttpProviderConfig, LlmProvider, ReplayProvider, ResponseCache, API_KEY_ENV};
use codealign::pipeline::{DecisionRecord, Pipeline, SystemIndex};
use codealign::retrieval::{
    read_index, Bm25Index, DenseIndex, EmbeddingProvider, HashEmbedder, HttpEmbedder, BM25_MAGIC, DENSE_MAGIC,
};
use codealign::terminology::Terminology;

use crate::config::{Config, EmbedderKind, ProviderKind};
use crate::{CliError, GoldArgs};

pub fn load_terminologies(config: &Config) -> Result<Vec<Arc<Terminology>>, CliError> {
    let mut out: Vec<Arc<Terminology>> = Vec::new();
    for t in &config.terminologies {
        let terminology = Terminology::load_path(&t.path, t.spec()?)
            .map_err(|e| CliError::Config(format!("{}: {e}", t.path.display())))?;
        if out.iter().any(|o| o.system_id() == terminology.system_id()) {
            return Err(CliError::Config(format!(
                "terminology {} configured twice",
                terminology.system_id()
            )));
        }
        out.push(Arc::new(terminology));
    }
    Ok(out)
}

pub fn find_terminology(all: &[Arc<Terminology>], system: &str) -> Result<Arc<Terminology>, CliError> {
    all.iter()
        .find(|t| t.system_id().eq_ignore_ascii_case(system))
        .cloned()
        .ok_or_else(|| CliError::Data(format!("no terminology configured for system `{system}`")))
}

pub fn embedder(config: &Config) -> Arc<dyn EmbeddingProvider> {
    let ix = &config.index;
    match ix.embedder {
        EmbedderKind::Hash => Arc::new(HashEmbedder::new(ix.embedding_dimension)),
        EmbedderKind::Http => Arc::new(HttpEmbedder::new(
            ix.embedding_endpoint.clone().unwrap_or_default(),
            ix.embedding_model.clone().unwrap_or_default(),
            std::env::var(API_KEY_ENV).ok(),
            ix.embedding_dimension,
        )),
    }
}

pub fn index_paths(config: &Config, system: &str) -> (PathBuf, PathBuf) {
    let dir = &config.index.dir;
    (
        dir.join(format!("{system}.bm25.json")),
        dir.join(format!("{system}.dense.json")),
    )
}

fn read_persisted<T: serde::de::DeserializeOwned>(magic: &str, path: &Path) -> Result<T, CliError> {
    let file = File::open(path).map_err(|e| {
        CliError::Io(format!(
            "{}: {e} (run `codealign index` first)",
            path.display()
        ))
    })?;
    read_index(magic, BufReader::new(file)).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn load_index(
    config: &Config,
    terminology: Arc<Terminology>,
    embedder: Arc<dyn EmbeddingProvider>,
) -> Result<SystemIndex, CliError> {
    let (bm25_path, dense_path) = index_paths(config, terminology.system_id());
    let bm25: Bm25Index = read_persisted(BM25_MAGIC, &bm25_path)?;
    let dense: DenseIndex = read_persisted(DENSE_MAGIC, &dense_path)?;
    SystemIndex::from_parts(terminology, bm25, dense, embedder)
        .map_err(|e| CliError::Io(format!("index for {}: {e}", dense_path.display())))
}

pub fn gateway(config: &Config) -> Result<Gateway, CliError> {
    let p = &config.provider;
    let provider: Arc<dyn LlmProvider> = match p.kind {
        ProviderKind::Replay => {
            let path = p.replay_path.as_ref().expect("validated");
            Arc::new(ReplayProvider::open(p.id.clone(), path).map_err(|e| CliError::Io(e.to_string()))?)
        }
        ProviderKind::Http => Arc::new(HttpProvider::new(HttpProviderConfig {
            id: p.id.clone(),
            endpoint: p.endpoint.clone().unwrap_or_default(),
            model: p.model.clone().unwrap_or_default(),
            token_ids: p.token_ids.clone(),
            supports_logit_bias: p.supports_logit_bias,
            timeout_secs: p.timeout_secs,
        })),
    };
    let mut gateway = Gateway::new(provider).with_retry(p.retry);
    if let Some(path) = &p.cache_path {
        let cache = ResponseCache::open(path).map_err(|e| CliError::Io(e.to_string()))?;
        gateway = gateway.with_cache(Arc::new(cache));
    }
    Ok(gateway)
}

pub fn pipeline(config: &Config) -> Result<Pipeline, CliError> {
    let embedder = embedder(config);
    let mut pipeline = Pipeline::new(gateway(config)?, config.pipeline.clone());
    for terminology in load_terminologies(config)? {
        pipeline = pipeline.with_system(load_index(config, terminology, embedder.clone())?);
    }
    Ok(pipeline)
}

pub fn read_decisions(path: &Path) -> Result<Vec<DecisionRecord>, CliError> {
    read_jsonl_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Items from a JSON-lines items file, or built from raw CSV records.
pub fn load_items(
    terminologies: &[Arc<Terminology>],
    gold: &GoldArgs,
) -> Result<Vec<EvalItem>, CliError> {
    let is_csv = gold.gold.extension().and_then(|e| e.to_str()) == Some("csv");
    if !is_csv {
        return read_jsonl_path(&gold.gold).map_err(|e| CliError::Io(format!("{}: {e}", gold.gold.display())));
    }
    let level = gold
        .level
        .as_deref()
        .ok_or_else(|| CliError::Data("--level is required with a raw CSV gold file".into()))?;
    let system = gold
        .system
        .clone()
        .unwrap_or_else(|| terminologies[0].system_id().to_string());
    let terminology = find_terminology(terminologies, &system)?;
    let raw = read_raw_records(&gold.gold).map_err(|e| CliError::Data(e.to_string()))?;
    build_eval_dataset(&raw, &terminology, level).map_err(|e| CliError::Data(e.to_string()))
}

/// The single terminology all items target.
pub fn terminology_of(terminologies: &[Arc<Terminology>], items: &[EvalItem]) -> Result<Arc<Terminology>, CliError> {
    let mut systems: Vec<&str> = items.iter().map(|i| i.query.target_system.as_str()).collect();
    systems.sort();
    systems.dedup();
    match systems.as_slice() {
        [one] => find_terminology(terminologies, one),
        [] => Err(CliError::Data("gold file has no items".into())),
        many => Err(CliError::Data(format!(
            "gold items span several systems ({}); evaluate one at a time",
            many.join(", ")
        ))),
    }
}
