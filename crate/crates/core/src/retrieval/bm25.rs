//! Okapi BM25 over an in-memory inverted index.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::tokenize::tokenize;
use super::{rank, RankedCandidate, RetrievalError, Source};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    pub k: usize,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self {
            k1: 1.5,
            b: 0.75,
            k: 10,
        }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if !(self.k1 >= 0.0) || !(0.0..=1.0).contains(&self.b) || self.k == 0 {
            return Err(RetrievalError::InvalidParams(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Posting {
    doc: u32,
    tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    codes: Vec<String>,
    doc_lengths: Vec<u32>,
    total_length: u64,
    postings: BTreeMap<String, Vec<Posting>>,
}

impl Bm25Index {
    pub fn build<S: AsRef<str>>(docs: &[(S, S)]) -> Result<Self, RetrievalError> {
        if docs.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut seen = BTreeSet::new();
        let mut codes = Vec::with_capacity(docs.len());
        let mut doc_lengths = Vec::with_capacity(docs.len());
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut total_length = 0u64;
        for (doc, (code, text)) in docs.iter().enumerate() {
            let code = code.as_ref();
            if !seen.insert(code) {
                return Err(RetrievalError::DuplicateDocument(code.to_string()));
            }
            let tokens = tokenize(text.as_ref());
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc: doc as u32,
                    tf: count,
                });
            }
            codes.push(code.to_string());
            doc_lengths.push(tokens.len() as u32);
            total_length += tokens.len() as u64;
        }
        Ok(Self {
            codes,
            doc_lengths,
            total_length,
            postings,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn average_doc_length(&self) -> f64 {
        self.total_length as f64 / self.codes.len() as f64
    }

    /// Score of every document for `query`, in build order. Query terms are
    /// treated as a set.
    pub fn scores(&self, query: &str, params: &Bm25Params) -> Vec<f64> {
        let mut scores = vec![0.0; self.codes.len()];
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        if terms.is_empty() {
            return scores;
        }
        let n = self.codes.len() as f64;
        let avgdl = self.average_doc_length();
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let df = list.len() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            for p in list {
                let tf = p.tf as f64;
                let dl = self.doc_lengths[p.doc as usize] as f64;
                // avgdl > 0 whenever a posting exists.
                let norm = params.k1 * (1.0 - params.b + params.b * dl / avgdl);
                scores[p.doc as usize] += idf * tf * (params.k1 + 1.0) / (tf + norm);
            }
        }
        scores
    }

    /// Top `params.k` documents with a positive score; ties broken by code.
    pub fn top_k(&self, query: &str, params: &Bm25Params) -> Vec<RankedCandidate> {
        self.top_k_where(query, params, |_| true)
    }

    /// Like [`Bm25Index::top_k`], restricted to codes accepted by `keep`.
    pub fn top_k_where(
        &self,
        query: &str,
        params: &Bm25Params,
        keep: impl Fn(&str) -> bool,
    ) -> Vec<RankedCandidate> {
        let hits = self
            .scores(query, params)
            .into_iter()
            .enumerate()
            .filter(|(i, s)| *s > 0.0 && keep(&self.codes[*i]))
            .map(|(i, s)| (self.codes[i].as_str(), s));
        rank(hits, params.k, Source::Bm25)
    }
}
