//! Text embedding providers.
//!
//! Every provider returns unit-L2-norm vectors of a fixed dimension. The
//! fallback provider is a deterministic hashed bag of words: lowercase, split
//! on non-alphanumerics, FNV-1a 64-bit hash of each token's UTF-8 bytes
//! modulo the dimension, +1 per token, then L2-normalize.

use std::time::Duration;

use serde_json::{json, Value};

use crate::config::{Config, EmbeddingBackendSpec};
use crate::error::{Error, Result};
use crate::http::{JsonPoster, RetryPolicy};

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>>;

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let mut out = self.embed_batch(&[text])?;
        out.pop()
            .ok_or_else(|| Error::EmbeddingBackend("provider returned no vector".into()))
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME)
    })
}

/// Lowercased alphanumeric runs of `text`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Scales `v` to unit L2 norm in place. Returns false for a zero vector.
pub fn l2_normalize(v: &mut [f32]) -> bool {
    let norm = v
        .iter()
        .map(|x| f64::from(*x) * f64::from(*x))
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / norm) as f32;
    }
    true
}

#[derive(Debug, Clone)]
pub struct FallbackEmbedder {
    dim: usize,
}

impl FallbackEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.dim as u64) as usize
    }

    fn embed_one(&self, text: &str) -> Result<Vec<f32>> {
        if text.is_empty() {
            return Err(Error::EmptyInput("text to embed"));
        }
        let mut counts = vec![0f64; self.dim];
        let tokens = tokenize(text);
        if tokens.is_empty() {
            // punctuation-only text: hash it whole so it still gets a vector
            counts[self.bucket(text)] += 1.0;
        }
        for token in &tokens {
            counts[self.bucket(token)] += 1.0;
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        Ok(counts.iter().map(|c| (c / norm) as f32).collect())
    }
}

impl Embedder for FallbackEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

/// Embeddings over an OpenAI-compatible `/embeddings` endpoint.
pub struct RemoteEmbedder {
    model: String,
    url: String,
    dim: usize,
    poster: JsonPoster,
}

impl RemoteEmbedder {
    pub fn new(
        model: impl Into<String>,
        base_url: &str,
        dim: usize,
        api_key: Option<String>,
        retry: RetryPolicy,
    ) -> Self {
        Self {
            model: model.into(),
            url: format!("{}/embeddings", base_url.trim_end_matches('/')),
            dim,
            poster: JsonPoster::new(api_key, retry, Duration::from_secs(60)),
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        if texts.iter().any(|t| t.is_empty()) {
            return Err(Error::EmptyInput("text to embed"));
        }
        let body = json!({ "model": self.model, "input": texts });
        let resp = self.poster.post(&self.url, &body).map_err(|f| {
            Error::EmbeddingBackend(match f.status {
                Some(s) => format!("HTTP {s}: {}", f.message),
                None => f.message,
            })
        })?;
        parse_embeddings_response(&resp, texts.len(), self.dim)
    }
}

/// Builds the embedder named by `config.embedding_backend`.
pub fn from_config(config: &Config) -> Result<Box<dyn Embedder>> {
    Ok(match config.embedding_backend_spec()? {
        EmbeddingBackendSpec::Fallback => Box::new(FallbackEmbedder::new(config.embedding_dim)),
        EmbeddingBackendSpec::Remote { model, base_url } => Box::new(RemoteEmbedder::new(
            model,
            &base_url,
            config.embedding_dim,
            config.api_key.clone(),
            RetryPolicy::default(),
        )),
    })
}

pub(crate) fn parse_embeddings_response(
    resp: &Value,
    expected: usize,
    dim: usize,
) -> Result<Vec<Vec<f32>>> {
    let bad = |m: String| Error::EmbeddingBackend(m);
    let data = resp
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("response lacks a data array".into()))?;
    if data.len() != expected {
        return Err(bad(format!(
            "expected {expected} embeddings, got {}",
            data.len()
        )));
    }
    // providers may return rows out of order; honor their index field
    let mut out: Vec<Option<Vec<f32>>> = vec![None; expected];
    for (pos, item) in data.iter().enumerate() {
        let slot = item
            .get("index")
            .and_then(Value::as_u64)
            .map(|i| i as usize)
            .unwrap_or(pos);
        let raw = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| bad(format!("data[{pos}] lacks an embedding array")))?;
        let mut v = raw
            .iter()
            .map(|x| x.as_f64().map(|f| f as f32))
            .collect::<Option<Vec<f32>>>()
            .ok_or_else(|| bad(format!("data[{pos}].embedding has non-numeric entries")))?;
        if v.len() != dim {
            return Err(bad(format!(
                "embedding dimension {} does not match configured {dim}",
                v.len()
            )));
        }
        if !l2_normalize(&mut v) {
            return Err(bad(format!("data[{pos}].embedding is a zero vector")));
        }
        match out.get_mut(slot) {
            Some(cell @ None) => *cell = Some(v),
            _ => return Err(bad(format!("bad or duplicate embedding index {slot}"))),
        }
    }
    Ok(out.into_iter().map(|v| v.expect("all slots filled")).collect())
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fnv_reference_values() {
        // published FNV-1a 64 test vectors
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(tokenize("Alice's HOME, in 2022!"), vec!["alice", "s", "home", "in", "2022"]);
        assert!(tokenize("?!").is_empty());
    }

    #[test]
    fn repeated_single_token_has_same_direction() {
        let e = FallbackEmbedder::new(8);
        assert_eq!(e.embed("a a").unwrap(), e.embed("a").unwrap());
    }

    #[test]
    fn deterministic_bits() {
        let e = FallbackEmbedder::new(64);
        let a = e.embed("Alice moved to Paris in May").unwrap();
        let b = e.embed("Alice moved to Paris in May").unwrap();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn disjoint_tokens_are_orthogonal() {
        let e = FallbackEmbedder::new(256);
        let left = ["alice", "paris"];
        let right = ["dog", "kayak"];
        // fixture check: no bucket shared between the two sides
        let lb: Vec<usize> = left.iter().map(|t| e.bucket(t)).collect();
        for t in right {
            assert!(!lb.contains(&e.bucket(t)), "fixture collision on {t}");
        }
        let a = e.embed("Alice Paris").unwrap();
        let b = e.embed("dog kayak").unwrap();
        assert_eq!(dot(&a, &b), 0.0);
    }

    #[test]
    fn empty_text_rejected() {
        assert!(matches!(
            FallbackEmbedder::new(8).embed(""),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn punctuation_only_text_still_embeds() {
        let e = FallbackEmbedder::new(16);
        let v = e.embed("???").unwrap();
        assert!((dot(&v, &v) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn embeddings_response_parsing() {
        let resp = json!({"data": [
            {"index": 1, "embedding": [0.0, 2.0]},
            {"index": 0, "embedding": [3.0, 4.0]}
        ]});
        let out = parse_embeddings_response(&resp, 2, 2).unwrap();
        assert_eq!(out[0], vec![0.6, 0.8]);
        assert_eq!(out[1], vec![0.0, 1.0]);
        assert!(parse_embeddings_response(&resp, 2, 3).is_err());
        assert!(parse_embeddings_response(&json!({"data": []}), 1, 2).is_err());
        let zero = json!({"data": [{"embedding": [0.0, 0.0]}]});
        assert!(parse_embeddings_response(&zero, 1, 2).is_err());
    }

    proptest! {
        #[test]
        fn fallback_vectors_are_unit_norm(text in "[a-zA-Z0-9 ,.'!?-]{1,80}", dim in 1usize..300) {
            let e = FallbackEmbedder::new(dim);
            let v = e.embed(&text).unwrap();
            prop_assert_eq!(v.len(), dim);
            prop_assert!((dot(&v, &v).sqrt() - 1.0).abs() <= 1e-6);
        }
    }
}
