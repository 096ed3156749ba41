use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::llm::UsageEntry;
use crate::retrieval::Source;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodingQuery {
    pub query_id: String,
    pub term: String,
    #[serde(default)]
    pub route: Option<String>,
    #[serde(default)]
    pub dosage: Option<String>,
    #[serde(rename = "system")]
    pub target_system: String,
    #[serde(rename = "level")]
    pub target_level: String,
}

impl CodingQuery {
    /// Text used for retrieval: the term plus the route, if any. Dosage is
    /// left out.
    pub fn retrieval_text(&self) -> String {
        match self.route.as_deref().map(str::trim).filter(|r| !r.is_empty()) {
            Some(route) => format!("{} {}", self.term.trim(), route),
            None => self.term.trim().to_string(),
        }
    }

    /// `dosage: …; route: …` for prompts, or `not provided`.
    pub fn medication_info(&self) -> String {
        let parts: Vec<String> = [("dosage", &self.dosage), ("route", &self.route)]
            .into_iter()
            .filter_map(|(k, v)| {
                v.as_deref()
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| format!("{k}: {s}"))
            })
            .collect();
        if parts.is_empty() {
            "not provided".to_string()
        } else {
            parts.join("; ")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub code: String,
    pub sources: BTreeSet<Source>,
    /// Dense cosine similarity if the dense channel proposed the code,
    /// otherwise the BM25 score, otherwise absent.
    #[serde(default)]
    pub retrieval_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntailmentVerdict {
    pub code: String,
    pub supported: bool,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqOption {
    pub label: String,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqSheet {
    pub options: Vec<McqOption>,
    pub none_label: String,
    pub reasoning_context: String,
}

impl McqSheet {
    pub fn code_of(&self, label: &str) -> Option<&str> {
        self.options
            .iter()
            .find(|o| o.label == label)
            .map(|o| o.code.as_str())
    }

    pub fn label_of(&self, code: &str) -> Option<&str> {
        self.options
            .iter()
            .find(|o| o.code == code)
            .map(|o| o.label.as_str())
    }

    /// All labels including the None option, in order.
    pub fn labels(&self) -> Vec<String> {
        self.options
            .iter()
            .map(|o| o.label.clone())
            .chain(std::iter::once(self.none_label.clone()))
            .collect()
    }
}

/// Option label for position `i` (0 → `A`).
pub fn option_label(i: usize) -> String {
    assert!(i < 26, "option labels are single letters");
    char::from(b'A' + i as u8).to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub code: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalMember {
    pub label: String,
    /// Absent for the None option.
    pub code: Option<String>,
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Align,
    Llm,
    LlmCot,
    Rag,
    RagCot,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Align,
        Method::Llm,
        Method::LlmCot,
        Method::Rag,
        Method::RagCot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Align => "ALIGN",
            Method::Llm => "LLM",
            Method::LlmCot => "LLM_COT",
            Method::Rag => "RAG",
            Method::RagCot => "RAG_COT",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let up = s.trim().to_uppercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == up)
            .ok_or_else(|| format!("unknown method `{s}` (expected ALIGN, LLM, LLM_COT, RAG, RAG_COT)"))
    }
}

/// Full per-query trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub query: CodingQuery,
    pub method: Method,
    pub seed: u64,
    #[serde(default)]
    pub context: String,
    #[serde(default)]
    pub alt_names: Vec<String>,
    #[serde(default)]
    pub candidates: Vec<Candidate>,
    #[serde(default)]
    pub verdicts: Vec<EntailmentVerdict>,
    #[serde(default)]
    pub sheet: Option<McqSheet>,
    #[serde(default)]
    pub distribution: BTreeMap<String, f64>,
    #[serde(default)]
    pub raw_logprobs: BTreeMap<String, f64>,
    #[serde(default)]
    pub entropy_nats: Option<f64>,
    #[serde(default)]
    pub normalized_entropy: Option<f64>,
    #[serde(default)]
    pub chosen: Option<String>,
    #[serde(default)]
    pub prediction_set: Vec<PredictionEntry>,
    #[serde(default)]
    pub deferred: bool,
    #[serde(default)]
    pub adjudicated_code: Option<String>,
    #[serde(default)]
    pub adjudicated_unmappable: bool,
    #[serde(default)]
    pub usage: Vec<UsageEntry>,
    #[serde(default)]
    pub filter_fallback: bool,
    #[serde(default)]
    pub no_logprobs: bool,
    #[serde(default)]
    pub no_logit_bias: bool,
    #[serde(default)]
    pub unlabeled_overflow: Vec<String>,
    /// Proposed codes that could not be resolved in the terminology.
    #[serde(default)]
    pub discarded_codes: usize,
    /// LLM-proposed strings that were not syntactically codes.
    #[serde(default)]
    pub dropped_llm_codes: usize,
    #[serde(default)]
    pub conformal_set: Option<Vec<ConformalMember>>,
    #[serde(default)]
    pub error: Option<String>,
}

impl DecisionRecord {
    pub fn new(query: CodingQuery, method: Method, seed: u64) -> Self {
        Self {
            query,
            method,
            seed,
            context: String::new(),
            alt_names: Vec::new(),
            candidates: Vec::new(),
            verdicts: Vec::new(),
            sheet: None,
            distribution: BTreeMap::new(),
            raw_logprobs: BTreeMap::new(),
            entropy_nats: None,
            normalized_entropy: None,
            chosen: None,
            prediction_set: Vec::new(),
            deferred: false,
            adjudicated_code: None,
            adjudicated_unmappable: false,
            usage: Vec::new(),
            filter_fallback: false,
            no_logprobs: false,
            no_logit_bias: false,
            unlabeled_overflow: Vec::new(),
            discarded_codes: 0,
            dropped_llm_codes: 0,
            conformal_set: None,
            error: None,
        }
    }

    pub fn record_id(&self) -> &str {
        &self.query.query_id
    }

    /// The code that counts for evaluation: a reviewer's adjudication when
    /// present, else the model's choice.
    pub fn effective_code(&self) -> Option<&str> {
        if self.adjudicated_unmappable {
            return None;
        }
        self.adjudicated_code.as_deref().or(self.chosen.as_deref())
    }

    /// Codes that survived entailment filtering (candidates minus pruned,
    /// or all candidates on fallback).
    pub fn survivors(&self) -> Vec<&Candidate> {
        if self.filter_fallback {
            return self.candidates.iter().collect();
        }
        let pruned: BTreeSet<&str> = self
            .verdicts
            .iter()
            .filter(|v| !v.supported)
            .map(|v| v.code.as_str())
            .collect();
        self.candidates
            .iter()
            .filter(|c| !pruned.contains(c.code.as_str()))
            .collect()
    }
}
