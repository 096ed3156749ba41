use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use codealign::pipeline::DecisionRecord;
use codealign::retrieval::Source;
use codealign::terminology::Terminology;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Pending,
    Adjudicated,
    Skipped,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pending => "PENDING",
            Status::Adjudicated => "ADJUDICATED",
            Status::Skipped => "SKIPPED",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Status {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_uppercase().as_str() {
            "PENDING" => Ok(Status::Pending),
            "ADJUDICATED" => Ok(Status::Adjudicated),
            "SKIPPED" => Ok(Status::Skipped),
            other => Err(format!("unknown status `{other}` (PENDING, ADJUDICATED, SKIPPED)")),
        }
    }
}

/// One candidate as a reviewer sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewCandidate {
    pub code: String,
    pub name: String,
    /// Option letter on the multiple-choice sheet, if the code was offered.
    pub label: Option<String>,
    pub probability: Option<f64>,
    pub sources: BTreeSet<Source>,
    /// Entailment verdict; absent when the code was never judged.
    pub supported: Option<bool>,
    pub explanation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub record_id: String,
    pub term: String,
    pub route: Option<String>,
    pub dosage: Option<String>,
    pub system: String,
    pub level: String,
    pub context: String,
    pub candidates: Vec<ReviewCandidate>,
    /// Probability mass on "None of the above".
    pub none_probability: Option<f64>,
    pub chosen: Option<String>,
    pub normalized_entropy: f64,
    pub status: Status,
    pub adjudicated_code: Option<String>,
    pub unmappable: bool,
    pub reviewer: Option<String>,
    pub adjudicated_at: Option<String>,
}

impl ReviewItem {
    /// Builds a pending item from a decision trace. Candidates on the answer
    /// sheet come first in sheet order, then the rest.
    pub fn from_decision(d: &DecisionRecord, terminology: Option<&Terminology>) -> Self {
        let name_of = |code: &str| {
            terminology
                .and_then(|t| t.get(code))
                .map(|e| e.name.clone())
                .unwrap_or_default()
        };
        let mut candidates: Vec<ReviewCandidate> = d
            .candidates
            .iter()
            .map(|c| {
                let label = d.sheet.as_ref().and_then(|s| s.label_of(&c.code)).map(str::to_string);
                let verdict = d.verdicts.iter().find(|v| v.code == c.code);
                ReviewCandidate {
                    code: c.code.clone(),
                    name: name_of(&c.code),
                    probability: label.as_ref().and_then(|l| d.distribution.get(l)).copied(),
                    label,
                    sources: c.sources.clone(),
                    supported: verdict.map(|v| v.supported),
                    explanation: verdict.map(|v| v.explanation.clone()),
                }
            })
            .collect();
        candidates.sort_by_key(|c| (c.label.is_none(), c.label.clone()));
        let none_probability = d
            .sheet
            .as_ref()
            .and_then(|s| d.distribution.get(&s.none_label))
            .copied();
        Self {
            record_id: d.record_id().to_string(),
            term: d.query.term.clone(),
            route: d.query.route.clone(),
            dosage: d.query.dosage.clone(),
            system: d.query.target_system.clone(),
            level: d.query.target_level.clone(),
            context: d.context.clone(),
            candidates,
            none_probability,
            chosen: d.chosen.clone(),
            normalized_entropy: d.normalized_entropy.unwrap_or(1.0).clamp(0.0, 1.0),
            status: Status::Pending,
            adjudicated_code: None,
            unmappable: false,
            reviewer: None,
            adjudicated_at: None,
        }
    }
}
