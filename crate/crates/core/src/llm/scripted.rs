//! Test-authored deterministic provider.

use std::sync::atomic::{AtomicUsize, Ordering};

use super::{
    CompletionRequest, CompletionResponse, LlmError, LlmProvider, TokenAlternative, TokenLogprob,
    Usage,
};

/// Log-probability reported for a positively biased token the script did not
/// mention, so that biased tokens always show up among the alternatives.
pub const UNLISTED_BIAS_LOGPROB: f64 = -50.0;

#[derive(Debug, Clone, PartialEq)]
pub enum ScriptedReply {
    /// Plain text. If log-probs are requested, the first whitespace token is
    /// reported with log-prob 0.
    Text(String),
    /// A single answer token with the given alternatives on that token.
    Answer {
        token: String,
        alternatives: Vec<(String, f64)>,
    },
}

impl ScriptedReply {
    pub fn text(s: impl Into<String>) -> Self {
        ScriptedReply::Text(s.into())
    }

    /// Answer token `token` with label log-probabilities `ln p` for each
    /// `(label, p)` pair.
    pub fn answer_with_probs(token: &str, probs: &[(&str, f64)]) -> Self {
        ScriptedReply::Answer {
            token: token.to_string(),
            alternatives: probs.iter().map(|(l, p)| (l.to_string(), p.ln())).collect(),
        }
    }
}

type Handler = dyn Fn(&CompletionRequest) -> Result<ScriptedReply, LlmError> + Send + Sync;

/// Deterministic provider driven by a closure over the request.
///
/// Token usage counts whitespace-separated tokens of the prompt and reply.
pub struct ScriptedProvider {
    id: String,
    handler: Box<Handler>,
    calls: AtomicUsize,
    logprobs_supported: bool,
}

pub fn whitespace_tokens(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

impl ScriptedProvider {
    pub fn new<F>(id: impl Into<String>, handler: F) -> Self
    where
        F: Fn(&CompletionRequest) -> Result<ScriptedReply, LlmError> + Send + Sync + 'static,
    {
        Self {
            id: id.into(),
            handler: Box::new(handler),
            calls: AtomicUsize::new(0),
            logprobs_supported: true,
        }
    }

    /// Never returns log-probabilities, like a provider lacking the feature.
    pub fn without_logprobs(mut self) -> Self {
        self.logprobs_supported = false;
        self
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmProvider for ScriptedProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let reply = (self.handler)(req)?;
        let (text, first_token, mut alternatives) = match reply {
            ScriptedReply::Text(t) => {
                let first = t.split_whitespace().next().unwrap_or("").to_string();
                let alts = vec![(first.clone(), 0.0)];
                (t, first, alts)
            }
            ScriptedReply::Answer {
                token,
                alternatives,
            } => (token.clone(), token, alternatives),
        };
        let token_logprobs = if req.want_logprobs && self.logprobs_supported {
            for (tok, bias) in &req.logit_bias {
                if *bias > 0.0 && !alternatives.iter().any(|(t, _)| t == tok) {
                    alternatives.push((tok.clone(), UNLISTED_BIAS_LOGPROB));
                }
            }
            let own = alternatives
                .iter()
                .find(|(t, _)| *t == first_token)
                .map(|(_, lp)| *lp)
                .unwrap_or(0.0);
            Some(vec![TokenLogprob {
                token: first_token,
                logprob: own,
                alternatives: alternatives
                    .into_iter()
                    .map(|(token, logprob)| TokenAlternative { token, logprob })
                    .collect(),
            }])
        } else {
            None
        };
        let input_tokens = req.messages.iter().map(|m| whitespace_tokens(&m.content)).sum();
        Ok(CompletionResponse {
            usage: Usage {
                input_tokens,
                output_tokens: whitespace_tokens(&text),
            },
            text,
            token_logprobs,
            provider_id: self.id.clone(),
        })
    }
}
