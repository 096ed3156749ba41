//! Chat-completion gateway: request/response types, providers (HTTP, replay,
//! scripted), response caching, prompt templates and cost accounting.

mod cost;
mod gateway;
mod http;
mod prompts;
mod replay;
mod scripted;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cost::{cost_of, PriceTable, Rates, UsageEntry};
pub use gateway::{Completion, Gateway, ResponseCache, RetryPolicy, StoreLine};
pub use http::{HttpProvider, HttpProviderConfig, API_KEY_ENV};
pub use prompts::{placeholders, render_prompt, template_body, PromptError, TemplateId};
pub use replay::ReplayProvider;
pub use scripted::{whitespace_tokens, ScriptedProvider, ScriptedReply, UNLISTED_BIAS_LOGPROB};

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_TOKENS: u32 = 500;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("unsupported feature: {0}")]
    UnsupportedFeature(String),
    #[error("no price for provider `{0}`")]
    UnknownProvider(String),
    #[error("cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub logit_bias: BTreeMap<String, f64>,
    #[serde(default)]
    pub want_logprobs: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl CompletionRequest {
    /// Single user turn with the default sampling parameters.
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            messages: vec![Message {
                role: Role::User,
                content: text.into(),
            }],
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            logit_bias: BTreeMap::new(),
            want_logprobs: false,
            top_logprobs: None,
            seed: None,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_logit_bias(mut self, bias: BTreeMap<String, f64>) -> Self {
        self.logit_bias = bias;
        self
    }

    pub fn with_logprobs(mut self, top: u8) -> Self {
        self.want_logprobs = true;
        self.top_logprobs = Some(top);
        self
    }

    /// Text of the last user message.
    pub fn prompt(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("request serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAlternative {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub alternatives: Vec<TokenAlternative>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub usage: Usage,
    pub provider_id: String,
}

pub trait LlmProvider: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError>;
}
