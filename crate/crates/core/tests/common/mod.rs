#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use codealign::llm::{CompletionRequest, LlmError, ScriptedReply};
use codealign::retrieval::HashEmbedder;
use codealign::terminology::{Terminology, TerminologySpec};
use codealign::pipeline::{CodingQuery, SystemIndex};

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn atc() -> Arc<Terminology> {
    Arc::new(Terminology::load_path(fixture_path("atc_mini.csv"), TerminologySpec::atc()).unwrap())
}

pub fn atc_index() -> SystemIndex {
    SystemIndex::build(atc(), Arc::new(HashEmbedder::new(256))).unwrap()
}

pub fn query(id: &str, term: &str, route: Option<&str>) -> CodingQuery {
    CodingQuery {
        query_id: id.into(),
        term: term.into(),
        route: route.map(str::to_string),
        dosage: None,
        target_system: "ATC".into(),
        target_level: "L4".into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Context,
    Synonyms,
    LlmCodes,
    RetrievalCodes,
    Entailment,
    Reasoning,
    Answer,
    BaselineLlm,
    BaselineRag,
}

pub fn stage_of(prompt: &str) -> Stage {
    if prompt.contains("provide context of the drug") {
        Stage::Context
    } else if prompt.contains("list alternative names") {
        Stage::Synonyms
    } else if prompt.contains("predict all the likely") {
        Stage::LlmCodes
    } else if prompt.contains("retrieval info to predict the correct") {
        Stage::RetrievalCodes
    } else if prompt.contains("Given the premise/context") {
        Stage::Entailment
    } else if prompt.starts_with("Given the concomitant medication query") {
        Stage::Reasoning
    } else if prompt.starts_with("Which is the correct") {
        Stage::Answer
    } else if prompt.contains("Return only the single most likely code") {
        Stage::BaselineLlm
    } else if prompt.contains("Rank the retrieved candidate") {
        Stage::BaselineRag
    } else {
        panic!("unrecognized prompt: {prompt}")
    }
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> &'a str {
    let from = text.find(start).unwrap_or_else(|| panic!("`{start}` missing")) + start.len();
    let rest = &text[from..];
    rest[..rest.find(end).unwrap_or(rest.len())].trim()
}

/// Query term named in a prompt of the given stage.
pub fn term_of(prompt: &str) -> String {
    match stage_of(prompt) {
        Stage::Context | Stage::Synonyms | Stage::LlmCodes | Stage::RetrievalCodes
        | Stage::BaselineLlm | Stage::BaselineRag => {
            // The format description also has a `Query:` line; the real one is last.
            let from = prompt.rfind("\nQuery: ").expect("query line") + "\nQuery: ".len();
            let rest = &prompt[from..];
            rest[..rest.find('\n').unwrap_or(rest.len())].trim().to_string()
        }
        Stage::Entailment => {
            let h = between(prompt, "Input hypothesis or query: ", "\n");
            h.split(" (").next().unwrap().to_string()
        }
        Stage::Reasoning => between(prompt, "medication query: ", " and context").to_string(),
        Stage::Answer => between(prompt, "code for ", " (").to_string(),
    }
}

/// Code being checked in an entailment prompt.
pub fn premise_code(prompt: &str) -> String {
    between(prompt, "premise: ", ":").to_string()
}

/// `(label, code)` option lines of an answer or ranking prompt; `None` code
/// for the none-of-the-above line.
pub fn options_of(prompt: &str) -> Vec<(String, Option<String>)> {
    prompt
        .lines()
        .filter_map(|line| {
            let (label, rest) = line.split_once(". ")?;
            if label.len() != 1 || !label.chars().all(|c| c.is_ascii_uppercase()) {
                return None;
            }
            if rest == "None of the above" {
                return Some((label.to_string(), None));
            }
            let code = rest.split(':').next()?.to_string();
            Some((label.to_string(), Some(code)))
        })
        .collect()
}

/// Scripted behavior for one query term.
#[derive(Debug, Clone, Default)]
pub struct TermScript {
    pub context: String,
    pub synonyms: String,
    pub codes: String,
    /// Codes whose entailment check fails.
    pub rejected: BTreeSet<String>,
    /// When set, only these codes pass the entailment check.
    pub accept_only: Option<BTreeSet<String>>,
    /// Replaces every entailment reply when set.
    pub verdict_text: Option<String>,
    /// Answer probabilities by code; `"NONE"` for none-of-the-above. Codes
    /// not listed share nothing and fall back to the missing-label floor.
    pub answer: Vec<(String, f64)>,
    pub baseline_code: String,
    /// Code to pick in a retrieval-ranking baseline.
    pub rag_pick: String,
}

impl TermScript {
    pub fn new(context: &str, synonyms: &str, codes: &str) -> Self {
        Self {
            context: context.into(),
            synonyms: synonyms.into(),
            codes: codes.into(),
            ..Default::default()
        }
    }

    pub fn reject(mut self, codes: &[&str]) -> Self {
        self.rejected = codes.iter().map(|c| c.to_string()).collect();
        self
    }

    pub fn accept_only(mut self, codes: &[&str]) -> Self {
        self.accept_only = Some(codes.iter().map(|c| c.to_string()).collect());
        self
    }

    pub fn answer(mut self, probs: &[(&str, f64)]) -> Self {
        self.answer = probs.iter().map(|(c, p)| (c.to_string(), *p)).collect();
        self
    }
}

pub type Script = BTreeMap<String, TermScript>;

/// Provider handler driven by per-term scripts.
pub fn handler(script: Script) -> impl Fn(&CompletionRequest) -> Result<ScriptedReply, LlmError> + Send + Sync + 'static {
    move |req: &CompletionRequest| {
        let prompt = req.prompt();
        let term = term_of(prompt);
        let s = script
            .get(&term)
            .ok_or_else(|| LlmError::ProviderUnavailable(format!("no script for {term}")))?;
        Ok(match stage_of(prompt) {
            Stage::Context => ScriptedReply::text(format!("Context: {}", s.context)),
            Stage::Synonyms => ScriptedReply::text(s.synonyms.clone()),
            Stage::LlmCodes | Stage::RetrievalCodes => ScriptedReply::text(s.codes.clone()),
            Stage::Entailment => {
                if let Some(v) = &s.verdict_text {
                    return Ok(ScriptedReply::text(v.clone()));
                }
                let code = premise_code(prompt);
                let pass = !s.rejected.contains(&code)
                    && s.accept_only.as_ref().is_none_or(|a| a.contains(&code));
                if !pass {
                    ScriptedReply::text(format!("Supported: 0\n\nexplanation: {code} does not fit {term}"))
                } else {
                    ScriptedReply::text(format!("Supported: 1\n\nexplanation: {code} fits {term}"))
                }
            }
            Stage::Reasoning => ScriptedReply::text(format!("Output: reasoning about {term}")),
            Stage::Answer => {
                let opts = options_of(prompt);
                let mut alts: Vec<(String, f64)> = Vec::new();
                for (label, code) in &opts {
                    let key = code.clone().unwrap_or_else(|| "NONE".into());
                    if let Some((_, p)) = s.answer.iter().find(|(c, _)| *c == key) {
                        alts.push((label.clone(), p.ln()));
                    }
                }
                let top = alts
                    .iter()
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|a| a.0.clone())
                    .unwrap_or_else(|| "A".into());
                ScriptedReply::Answer {
                    token: top,
                    alternatives: alts,
                }
            }
            Stage::BaselineLlm => ScriptedReply::text(format!("ATC Code: {}", s.baseline_code)),
            Stage::BaselineRag => {
                let opts = options_of(prompt);
                let label = opts
                    .iter()
                    .find(|(_, c)| c.as_deref() == Some(s.rag_pick.as_str()))
                    .map(|(l, _)| l.clone())
                    .unwrap_or_else(|| "A".into());
                ScriptedReply::text(format!("Answer: {label}"))
            }
        })
    }
}
