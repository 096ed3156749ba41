//! Non-LLM candidate channels: sparse BM25 and dense cosine retrieval.

mod bm25;
mod dense;
mod embed;
mod tokenize;

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

pub use bm25::{Bm25Index, Bm25Params};
pub use dense::{cosine_similarity, DenseEntry, DenseIndex};
pub use embed::{embed, EmbeddingProvider, HashEmbedder, HttpEmbedder};
pub use tokenize::tokenize;

use crate::terminology::CodeEntry;

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,
    #[error("document `{0}` appears twice")]
    DuplicateDocument(String),
    #[error("vector dimension {actual} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("invalid retrieval parameters: {0}")]
    InvalidParams(String),
    #[error("index file: {0}")]
    Persistence(String),
}

/// Which channel proposed a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Source {
    Llm,
    Bm25,
    Dense,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Llm, Source::Bm25, Source::Dense];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Llm => "LLM",
            Source::Bm25 => "BM25",
            Source::Dense => "DENSE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub code: String,
    pub score: f64,
    pub rank: usize,
    pub source: Source,
}

/// Sorts by score descending, then code ascending, and keeps the first `k`.
pub(crate) fn rank<'a>(
    hits: impl Iterator<Item = (&'a str, f64)>,
    k: usize,
    source: Source,
) -> Vec<RankedCandidate> {
    let mut hits: Vec<(&str, f64)> = hits.collect();
    hits.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(b.0))
    });
    hits.into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (code, score))| RankedCandidate {
            code: code.to_string(),
            score,
            rank: i + 1,
            source,
        })
        .collect()
}

/// Text indexed for a code: `name + ". " + description`.
pub fn document_text(entry: &CodeEntry) -> String {
    format!("{}. {}", entry.name, entry.description)
}

pub const BM25_MAGIC: &str = "CODEALIGN-BM25 v1";
pub const DENSE_MAGIC: &str = "CODEALIGN-DENSE v1";

/// Writes `value` as a magic header line followed by one JSON document.
pub fn write_index<T: Serialize, W: Write>(
    magic: &str,
    value: &T,
    mut sink: W,
) -> Result<(), RetrievalError> {
    let err = |e: String| RetrievalError::Persistence(e);
    writeln!(sink, "{magic}").map_err(|e| err(e.to_string()))?;
    serde_json::to_writer(&mut sink, value).map_err(|e| err(e.to_string()))?;
    writeln!(sink).map_err(|e| err(e.to_string()))?;
    sink.flush().map_err(|e| err(e.to_string()))
}

pub fn read_index<T: DeserializeOwned, R: BufRead>(
    magic: &str,
    mut source: R,
) -> Result<T, RetrievalError> {
    let mut header = String::new();
    source
        .read_line(&mut header)
        .map_err(|e| RetrievalError::Persistence(e.to_string()))?;
    if header.trim_end() != magic {
        return Err(RetrievalError::Persistence(format!(
            "bad header `{}`, expected `{magic}`",
            header.trim_end()
        )));
    }
    serde_json::from_reader(source).map_err(|e| RetrievalError::Persistence(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn persistence_round_trip_is_lossless() {
        let bm = Bm25Index::build(&[("A", "fever pain"), ("B", "cough")]).unwrap();
        let dense = DenseIndex::build(
            2,
            vec![("A".into(), vec![0.1, 1.0 / 3.0]), ("B".into(), vec![-2.5e-300, 7.0])],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_index(BM25_MAGIC, &bm, &mut buf).unwrap();
        let back: Bm25Index = read_index(BM25_MAGIC, buf.as_slice()).unwrap();
        assert_eq!(back, bm);

        let mut buf = Vec::new();
        write_index(DENSE_MAGIC, &dense, &mut buf).unwrap();
        let back: DenseIndex = read_index(DENSE_MAGIC, buf.as_slice()).unwrap();
        assert_eq!(back, dense);
    }

    #[test]
    fn wrong_magic_rejected() {
        let bm = Bm25Index::build(&[("A", "x y")]).unwrap();
        let mut buf = Vec::new();
        write_index(BM25_MAGIC, &bm, &mut buf).unwrap();
        let res: Result<Bm25Index, _> = read_index(DENSE_MAGIC, buf.as_slice());
        assert!(matches!(res, Err(RetrievalError::Persistence(_))));
    }
}
