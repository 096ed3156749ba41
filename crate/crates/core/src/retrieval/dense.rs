//! Exact cosine-similarity retrieval over stored (unnormalized) vectors.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{rank, RankedCandidate, RetrievalError, Source};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseEntry {
    pub code: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseIndex {
    dimension: usize,
    k: usize,
    entries: Vec<DenseEntry>,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

impl DenseIndex {
    pub fn build(
        dimension: usize,
        entries: Vec<(String, Vec<f64>)>,
    ) -> Result<Self, RetrievalError> {
        if dimension == 0 {
            return Err(RetrievalError::InvalidParams("dimension must be positive".into()));
        }
        if entries.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(entries.len());
        for (code, vector) in entries {
            if vector.len() != dimension {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dimension,
                    actual: vector.len(),
                });
            }
            if !seen.insert(code.clone()) {
                return Err(RetrievalError::DuplicateDocument(code));
            }
            out.push(DenseEntry { code, vector });
        }
        Ok(Self {
            dimension,
            k: 10,
            entries: out,
        })
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k.max(1);
        self
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn default_k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DenseEntry] {
        &self.entries
    }

    pub fn top_k(&self, query: &[f64], k: usize) -> Result<Vec<RankedCandidate>, RetrievalError> {
        self.top_k_where(query, k, |_| true)
    }

    /// Like [`DenseIndex::top_k`], restricted to codes accepted by `keep`.
    /// An all-zero query yields no hits.
    pub fn top_k_where(
        &self,
        query: &[f64],
        k: usize,
        keep: impl Fn(&str) -> bool,
    ) -> Result<Vec<RankedCandidate>, RetrievalError> {
        if query.len() != self.dimension {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dimension,
                actual: query.len(),
            });
        }
        // A zero query carries no signal; every similarity would be 0.
        if query.iter().all(|x| *x == 0.0) {
            return Ok(Vec::new());
        }
        let hits = self
            .entries
            .iter()
            .filter(|e| keep(&e.code))
            .map(|e| (e.code.as_str(), cosine_similarity(query, &e.vector)));
        Ok(rank(hits, k, Source::Dense))
    }
}
