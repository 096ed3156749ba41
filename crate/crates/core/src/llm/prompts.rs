//! Prompt templates.
//!
//! `{name}` is a placeholder (names may contain spaces), `{{` and `}}` are
//! literal braces. `{system}` stands for the code-system name, so rendering
//! with `system = "ATC"` yields the original ATC wording.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("missing binding for placeholder `{0}`")]
    MissingBinding(String),
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("malformed template: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TemplateId {
    Contextualizer,
    RetrievalCandidates,
    LlmCandidates,
    Entailment,
    McqReasoning,
    McqAnswer,
    Synonyms,
    BaselineLlm,
    BaselineRag,
}

impl TemplateId {
    pub const ALL: [TemplateId; 9] = [
        TemplateId::Contextualizer,
        TemplateId::RetrievalCandidates,
        TemplateId::LlmCandidates,
        TemplateId::Entailment,
        TemplateId::McqReasoning,
        TemplateId::McqAnswer,
        TemplateId::Synonyms,
        TemplateId::BaselineLlm,
        TemplateId::BaselineRag,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Contextualizer => "CONTEXTUALIZER",
            TemplateId::RetrievalCandidates => "RETRIEVAL_CANDIDATES",
            TemplateId::LlmCandidates => "LLM_CANDIDATES",
            TemplateId::Entailment => "ENTAILMENT",
            TemplateId::McqReasoning => "MCQ_REASONING",
            TemplateId::McqAnswer => "MCQ_ANSWER",
            TemplateId::Synonyms => "SYNONYMS",
            TemplateId::BaselineLlm => "BASELINE_LLM",
            TemplateId::BaselineRag => "BASELINE_RAG",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| PromptError::UnknownTemplate(s.to_string()))
    }
}

const CONTEXTUALIZER: &str = "You are an {system} Matching Expert. Your goal is given a query to provide context of the drug. Format the output as follows:

- (1) what it's used for
- (2) what it does
- (3) ingredients
- (4) how it is used (orally, topical, intravenous etc).

Follow the following format.

Query: Input query for which we want to find the {system} code

Context: Description and context of the role of the query medication

Query: {medication name}

Please provide the output field Context. Do so immediately, without additional content before or after, and precisely as the format above shows. Begin with only the field Context.";

const RETRIEVAL_CANDIDATES: &str = "You are an {system} Matching Expert. Your goal is given a query, context and retrieval info to predict the correct {system} code.

Follow the following format.

Query: Input query for which we want to find the {system} code

Context: Description and context of the query

Context: Retrieved info based on the query on the {system} docs

{system} Codes: All likely predicted {system} code given query, context and retrieval info. Return only the codes (can be more than one).

Query: {medication name}

Context: {Medication context}

Context: {candidates retrieved via Dense retrieval or BM25}

Please provide the output field {system} Codes. Do so immediately, without additional content before or after, and precisely as the format above shows. Begin with only the field {system} Codes.";

const LLM_CANDIDATES: &str = "You are an {system} Matching Expert. Your goal is given a query, context and alternative names to predict all the likely {system} codes.

Follow the following format.

Query: {medication name}

Context: {Medication context}

medication info: {dosage and administration route}

{system} Codes: All likely predicted {system} codes given query, context and retrieval info. Return only the codes (can be more than one code) in a comma separated list.";

const ENTAILMENT: &str = "You are an {system} Matching Expert. Given the premise/context, is the hypothesis/query supported or related within the current context and why? Return 1 if supported or 0 if not.

Input hypothesis or query: {query medication}

Additional context about the query: {context on query}

premise: {premise or context on code}

Output

Supported: {{predicted 1/0}}

explanation: {{reasoning}}";

const MCQ_REASONING: &str = "Given the concomitant medication query: {query} and context {drug_info}.

Please select the best {system} matches from {candidates after self-evaluation}.

Think step by step and give your reasoning.

Output: {{llm_reasoning_context}}";

const MCQ_ANSWER: &str = "Which is the correct {system} code for {medication_name} ({medication_info}):

{options}

Which option is correct accounting for the context: {llm_reasoning_context}";

const SYNONYMS: &str = "You are an {system} Matching Expert. Your goal is given a query and its context to list alternative names for the query (generic names, brand names and synonyms).

Query: {medication name}

Context: {Medication context}

Alternative Names: Return only the names in a comma separated list, or nothing if there are none.";

const BASELINE_LLM: &str = "You are an {system} Matching Expert. Your goal is given a query to predict the correct {system} code.

Query: {medication name}

medication info: {dosage and administration route}
{reasoning instruction}
{system} Code: Return only the single most likely code.";

const BASELINE_RAG: &str = "You are an {system} Matching Expert. Rank the retrieved candidate {system} codes for the query and select the most appropriate option.

Query: {medication name}

medication info: {dosage and administration route}

Options:
{options}
{reasoning instruction}
Answer: Return only the letter of the best option.";

pub fn template_body(id: TemplateId) -> &'static str {
    match id {
        TemplateId::Contextualizer => CONTEXTUALIZER,
        TemplateId::RetrievalCandidates => RETRIEVAL_CANDIDATES,
        TemplateId::LlmCandidates => LLM_CANDIDATES,
        TemplateId::Entailment => ENTAILMENT,
        TemplateId::McqReasoning => MCQ_REASONING,
        TemplateId::McqAnswer => MCQ_ANSWER,
        TemplateId::Synonyms => SYNONYMS,
        TemplateId::BaselineLlm => BASELINE_LLM,
        TemplateId::BaselineRag => BASELINE_RAG,
    }
}

/// Substitutes every placeholder in the template. Unused bindings are ignored.
pub fn render_prompt(
    id: TemplateId,
    bindings: &BTreeMap<String, String>,
) -> Result<String, PromptError> {
    render(template_body(id), bindings)
}

fn render(body: &str, bindings: &BTreeMap<String, String>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(body.len() + 256);
    let mut rest = body;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix("{{") {
            out.push('{');
            rest = after;
        } else if let Some(after) = tail.strip_prefix("}}") {
            out.push('}');
            rest = after;
        } else if tail.starts_with('}') {
            return Err(PromptError::Malformed(format!("stray `}}` at byte {pos}")));
        } else {
            let close = tail
                .find('}')
                .ok_or_else(|| PromptError::Malformed("unclosed `{`".into()))?;
            let name = &tail[1..close];
            let value = bindings
                .get(name)
                .ok_or_else(|| PromptError::MissingBinding(name.to_string()))?;
            out.push_str(value);
            rest = &tail[close + 1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Placeholder names of a template, in order of first appearance.
pub fn placeholders(id: TemplateId) -> Vec<String> {
    let mut names = Vec::new();
    let mut rest = template_body(id);
    while let Some(pos) = rest.find('{') {
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix("{{") {
            rest = after;
            continue;
        }
        let close = tail.find('}').expect("templates are well formed");
        let name = tail[1..close].to_string();
        if !names.contains(&name) {
            names.push(name);
        }
        rest = &tail[close + 1..];
    }
    names
}
