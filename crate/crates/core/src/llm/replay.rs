use std::collections::HashMap;
use std::path::Path;

use super::{CompletionRequest, CompletionResponse, LlmError, LlmProvider, StoreLine};
use crate::jsonl::read_jsonl_path;

/// Serves recorded responses by request digest.
#[derive(Debug, Clone)]
pub struct ReplayProvider {
    id: String,
    responses: HashMap<String, CompletionResponse>,
}

impl ReplayProvider {
    pub fn from_lines(id: impl Into<String>, lines: Vec<StoreLine>) -> Self {
        let responses = lines.into_iter().map(|l| (l.digest, l.response)).collect();
        Self {
            id: id.into(),
            responses,
        }
    }

    pub fn open(id: impl Into<String>, path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let lines: Vec<StoreLine> = read_jsonl_path(path.as_ref())
            .map_err(|e| LlmError::ProviderUnavailable(format!("replay store: {e}")))?;
        Ok(Self::from_lines(id, lines))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl LlmProvider for ReplayProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let digest = req.digest();
        self.responses.get(&digest).cloned().ok_or_else(|| {
            LlmError::ProviderUnavailable(format!("no recorded response for digest {digest}"))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::Usage;

    #[test]
    fn replays_recorded_and_rejects_unknown() {
        let req = CompletionRequest::user("hello");
        let resp = CompletionResponse {
            text: "world".into(),
            token_logprobs: None,
            usage: Usage { input_tokens: 1, output_tokens: 1 },
            provider_id: "recorded".into(),
        };
        let p = ReplayProvider::from_lines(
            "replay",
            vec![StoreLine { digest: req.digest(), request: req.clone(), response: resp.clone() }],
        );
        assert_eq!(p.complete(&req).unwrap(), resp);
        let other = CompletionRequest::user("bye");
        match p.complete(&other) {
            Err(LlmError::ProviderUnavailable(msg)) => assert!(msg.contains(&other.digest())),
            r => panic!("unexpected {r:?}"),
        }
    }
}
