use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{CompletionRequest, CompletionResponse, LlmError, LlmProvider};
use crate::jsonl::read_jsonl_path;

/// One line of a replay store / persisted cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreLine {
    pub digest: String,
    pub request: CompletionRequest,
    pub response: CompletionResponse,
}

/// Response cache keyed by `(provider_id, request digest)`, optionally
/// mirrored to an append-only JSON-lines file in replay-store format.
#[derive(Debug, Default)]
pub struct ResponseCache {
    entries: Mutex<HashMap<(String, String), CompletionResponse>>,
    path: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates on first write) a persistent cache file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let lines: Vec<StoreLine> =
                read_jsonl_path(&path).map_err(|e| LlmError::Cache(e.to_string()))?;
            for line in lines {
                entries.insert((line.response.provider_id.clone(), line.digest), line.response);
            }
        }
        Ok(Self {
            entries: Mutex::new(entries),
            path: Some(path),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, provider_id: &str, digest: &str) -> Option<CompletionResponse> {
        self.entries
            .lock()
            .expect("cache lock")
            .get(&(provider_id.to_string(), digest.to_string()))
            .cloned()
    }

    pub fn put(
        &self,
        provider_id: &str,
        request: &CompletionRequest,
        response: &CompletionResponse,
    ) -> Result<(), LlmError> {
        let digest = request.digest();
        let mut entries = self.entries.lock().expect("cache lock");
        let key = (provider_id.to_string(), digest.clone());
        let fresh = !entries.contains_key(&key);
        entries.insert(key, response.clone());
        if let (true, Some(path)) = (fresh, &self.path) {
            let line = serde_json::to_string(&StoreLine {
                digest,
                request: request.clone(),
                response: response.clone(),
            })
            .map_err(|e| LlmError::Cache(e.to_string()))?;
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| LlmError::Cache(format!("{}: {e}", path.display())))?;
            writeln!(file, "{line}").map_err(|e| LlmError::Cache(e.to_string()))?;
        }
        Ok(())
    }
}

/// Bounded exponential backoff for rate-limited calls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    pub fn delay_for(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(20);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub response: CompletionResponse,
    pub cached: bool,
}

/// A provider plus caching and retry behavior.
#[derive(Clone)]
pub struct Gateway {
    provider: Arc<dyn LlmProvider>,
    cache: Option<Arc<ResponseCache>>,
    retry: RetryPolicy,
}

impl Gateway {
    pub fn new(provider: Arc<dyn LlmProvider>) -> Self {
        Self {
            provider,
            cache: None,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn provider_id(&self) -> &str {
        self.provider.id()
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<Completion, LlmError> {
        let provider_id = self.provider.id();
        let digest = req.digest();
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(provider_id, &digest)) {
            return Ok(Completion {
                response: hit,
                cached: true,
            });
        }
        let mut attempt = 1;
        let response = loop {
            match self.provider.complete(req) {
                Ok(r) => break r,
                Err(LlmError::RateLimited(msg)) if attempt < self.retry.max_attempts => {
                    log::warn!("{provider_id}: rate limited ({msg}), attempt {attempt}");
                    std::thread::sleep(self.retry.delay_for(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        if let Some(cache) = &self.cache {
            cache.put(provider_id, req, &response)?;
        }
        Ok(Completion {
            response,
            cached: false,
        })
    }
}
