//! Embedding providers and vector helpers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::fnv1a;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("embedding contains a non-finite value at position {0}")]
    NonFinite(usize),
    #[error("embedding provider failed: {0}")]
    Provider(String),
}

/// A fixed-dimension dense vector with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbedError> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite(pos));
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn check_dim(&self, expected: usize) -> Result<(), EmbedError> {
        if self.0.len() != expected {
            return Err(EmbedError::Dimension {
                expected,
                got: self.0.len(),
            });
        }
        Ok(())
    }

    pub fn dot(&self, other: &[f32]) -> f64 {
        dot_f32(&self.0, other)
    }
}

/// Dot product accumulated in f64, strictly left to right.
pub fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc + f64::from(x) * f64::from(y))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `1 - cosine similarity`. Bit-identical inputs give exactly 0; a zero-norm
/// input gives 0 with a warning.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 0.0;
    }
    match cosine_similarity(a, b) {
        Some(sim) => 1.0 - sim,
        None => {
            log::warn!("cosine distance on a zero-norm embedding; using 0");
            0.0
        }
    }
}

pub fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

/// Sentence/passage embedding provider (question, document and sentence
/// encoders all share this interface).
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError>;

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let mut out = self.embed_batch(&[text])?;
        out.pop()
            .ok_or_else(|| EmbedError::Provider("provider returned an empty batch".into()))
    }
}

/// Lowercased alphanumeric word tokens.
pub fn word_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .map(|w| w.trim_matches('\'').to_lowercase())
        .filter(|w| !w.is_empty())
}

/// Signed feature hashing of a token into `dim` buckets.
pub fn hash_bucket(token: &str, dim: usize) -> (usize, f64) {
    let h = fnv1a(token.as_bytes());
    let bucket = (h % dim as u64) as usize;
    let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
    (bucket, sign)
}

/// Hashed bag-of-words with sublinear term weighting (`1 + ln tf`),
/// L2-normalised. Text without word tokens embeds to the zero vector.
#[derive(Debug, Clone)]
pub struct HashedBowEmbedder {
    dim: usize,
}

impl HashedBowEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashedBowEmbedder { dim }
    }

    pub fn embed_text(&self, text: &str) -> Embedding {
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for w in word_tokens(text) {
            *tf.entry(w).or_default() += 1;
        }
        let mut v = vec![0.0f64; self.dim];
        for (word, count) in &tf {
            let (bucket, sign) = hash_bucket(word, self.dim);
            v[bucket] += sign * (1.0 + f64::from(*count).ln());
        }
        l2_normalize(&mut v);
        Embedding(v.into_iter().map(|x| x as f32).collect())
    }
}

impl Embedder for HashedBowEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_edge_cases() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn bow_is_normalised_and_deterministic() {
        let e = HashedBowEmbedder::new(64);
        let a = e.embed_text("The whale, the WHALE and the sea.");
        let b = e.embed_text("the whale the whale and the sea");
        assert_eq!(a, b);
        let norm: f64 = a.as_slice().iter().map(|x| f64::from(*x).powi(2)).sum();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!(e.embed_text("...").as_slice().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn embedding_rejects_non_finite() {
        assert!(matches!(
            Embedding::new(vec![1.0, f32::NAN]),
            Err(EmbedError::NonFinite(1))
        ));
        assert!(Embedding::new(vec![0.5]).unwrap().check_dim(2).is_err());
    }
}
