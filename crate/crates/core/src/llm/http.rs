//! Remote chat-completions provider (OpenAI-compatible wire shape).

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    CompletionRequest, CompletionResponse, LlmError, LlmProvider, TokenAlternative, TokenLogprob,
    Usage,
};

pub const API_KEY_ENV: &str = "CODEALIGN_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpProviderConfig {
    /// Id used for caching and pricing, e.g. `gpt-4o-mini`.
    pub id: String,
    pub endpoint: String,
    pub model: String,
    /// Provider token ids for logit-bias keys. The wire format biases token
    /// ids, so every biased token must be listed here.
    #[serde(default)]
    pub token_ids: BTreeMap<String, u32>,
    #[serde(default = "default_true")]
    pub supports_logit_bias: bool,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_true() -> bool {
    true
}

fn default_timeout() -> u64 {
    120
}

pub struct HttpProvider {
    config: HttpProviderConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpProvider {
    /// Reads the API key from `CODEALIGN_LLM_API_KEY`.
    pub fn new(config: HttpProviderConfig) -> Self {
        let api_key = std::env::var(API_KEY_ENV).ok();
        Self::with_key(config, api_key)
    }

    pub fn with_key(config: HttpProviderConfig, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            config,
            api_key,
            agent,
        }
    }

    pub fn wire_request(&self, req: &CompletionRequest) -> Result<Value, LlmError> {
        let mut body = json!({
            "model": self.config.model,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if !req.logit_bias.is_empty() {
            if !self.config.supports_logit_bias {
                return Err(LlmError::UnsupportedFeature("logit_bias".into()));
            }
            let mut bias = serde_json::Map::new();
            for (token, value) in &req.logit_bias {
                let id = self.config.token_ids.get(token).ok_or_else(|| {
                    LlmError::UnsupportedFeature(format!("no token id configured for `{token}`"))
                })?;
                bias.insert(id.to_string(), json!(value));
            }
            body["logit_bias"] = Value::Object(bias);
        }
        if req.want_logprobs {
            body["logprobs"] = json!(true);
            if let Some(n) = req.top_logprobs {
                body["top_logprobs"] = json!(n);
            }
        }
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        Ok(body)
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Option<Vec<WireToken>>,
}

#[derive(Deserialize)]
struct WireToken {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<WireAlt>,
}

#[derive(Deserialize)]
struct WireAlt {
    token: String,
    logprob: f64,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl LlmProvider for HttpProvider {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let body = self.wire_request(req)?;
        let mut call = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call
            .send_json(&body)
            .map_err(|e| LlmError::ProviderUnavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 {
            return Err(LlmError::RateLimited(format!("HTTP 429 from {}", self.config.endpoint)));
        }
        if !(200..300).contains(&status) {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            let snippet: String = text.chars().take(200).collect();
            return Err(LlmError::ProviderUnavailable(format!("HTTP {status}: {snippet}")));
        }
        let wire: WireResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| LlmError::ProviderUnavailable(format!("bad response body: {e}")))?;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::ProviderUnavailable("response has no choices".into()))?;
        let token_logprobs = if req.want_logprobs {
            choice.logprobs.and_then(|l| l.content).map(|tokens| {
                tokens
                    .into_iter()
                    .map(|t| TokenLogprob {
                        token: t.token,
                        logprob: t.logprob,
                        alternatives: t
                            .top_logprobs
                            .into_iter()
                            .map(|a| TokenAlternative {
                                token: a.token,
                                logprob: a.logprob,
                            })
                            .collect(),
                    })
                    .collect()
            })
        } else {
            None
        };
        let usage = wire.usage.map_or(Usage::default(), |u| Usage {
            input_tokens: u.prompt_tokens,
            output_tokens: u.completion_tokens,
        });
        Ok(CompletionResponse {
            text: choice.message.content.unwrap_or_default(),
            token_logprobs,
            usage,
            provider_id: self.config.id.clone(),
        })
    }
}
