//! Text embedding providers.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tokenize::tokenize;
use super::RetrievalError;

pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError>;
}

/// Embeds `texts`, checking that the provider returned one vector of the
/// configured dimension per input.
pub fn embed(
    provider: &dyn EmbeddingProvider,
    texts: &[String],
) -> Result<Vec<Vec<f64>>, RetrievalError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let vectors = provider.embed_batch(texts)?;
    if vectors.len() != texts.len() {
        return Err(RetrievalError::ProviderUnavailable(format!(
            "expected {} embeddings, got {}",
            texts.len(),
            vectors.len()
        )));
    }
    for v in &vectors {
        if v.len() != provider.dimension() {
            return Err(RetrievalError::DimensionMismatch {
                expected: provider.dimension(),
                actual: v.len(),
            });
        }
    }
    Ok(vectors)
}

/// Deterministic feature-hashing embedder for offline use.
///
/// Each word token and each boundary-marked character trigram is hashed into
/// a signed bucket, so texts that share words or word fragments end up with
/// positive cosine similarity.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }

    fn add_feature(&self, v: &mut [f64], feature: &str, weight: f64) {
        let digest = Sha256::digest(feature.as_bytes());
        let mut bucket = [0u8; 8];
        bucket.copy_from_slice(&digest[..8]);
        let idx = (u64::from_le_bytes(bucket) % self.dimension as u64) as usize;
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        v[idx] += sign * weight;
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        for token in tokenize(text) {
            self.add_feature(&mut v, &format!("w:{token}"), 1.0);
            let marked: Vec<char> = format!("^{token}$").chars().collect();
            for tri in marked.windows(3) {
                let tri: String = tri.iter().collect();
                self.add_feature(&mut v, &format!("c:{tri}"), 0.5);
            }
        }
        v
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Remote embeddings endpoint speaking the common `{model, input}` →
/// `{data: [{embedding, index}]}` JSON shape.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    dimension: usize,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
    dimensions: usize,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: usize,
}

impl HttpEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        dimension: usize,
    ) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            dimension,
            agent,
        }
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let body = EmbeddingRequest {
            model: &self.model,
            input: texts,
            dimensions: self.dimension,
        };
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| RetrievalError::ProviderUnavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(RetrievalError::ProviderUnavailable(format!(
                "embedding endpoint returned {}",
                resp.status()
            )));
        }
        let mut parsed: EmbeddingResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| RetrievalError::ProviderUnavailable(e.to_string()))?;
        parsed.data.sort_by_key(|d| d.index);
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::dense::cosine_similarity;

    #[test]
    fn identical_texts_identical_vectors() {
        let e = HashEmbedder::new(64);
        assert_eq!(e.embed_one("paracetamol oral"), e.embed_one("paracetamol oral"));
    }

    #[test]
    fn empty_list() {
        let e = HashEmbedder::new(8);
        assert!(embed(&e, &[]).unwrap().is_empty());
    }

    #[test]
    fn shared_words_are_similar() {
        let e = HashEmbedder::new(256);
        let a = e.embed_one("ibuprofen tablets");
        let b = e.embed_one("ibuprofen");
        let c = e.embed_one("warfarin");
        assert!(cosine_similarity(&a, &b) > cosine_similarity(&a, &c));
    }

    struct Short;
    impl EmbeddingProvider for Short {
        fn dimension(&self) -> usize {
            4
        }
        fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
            Ok(texts.iter().map(|_| vec![0.0; 3]).collect())
        }
    }

    #[test]
    fn provider_dimension_is_checked() {
        assert!(matches!(
            embed(&Short, &["x".to_string()]).unwrap_err(),
            RetrievalError::DimensionMismatch { expected: 4, actual: 3 }
        ));
    }
}
