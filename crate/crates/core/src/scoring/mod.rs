//! The scorer boundary and everything computed from it: token-level
//! marginalisation over retrieved passages, length-normalised coherence and
//! perplexity.
//!
//! A scorer returns, for every retrieved passage, the log-probability of each
//! target token conditioned on context plus that passage. Mixing those rows
//! with the retrieval weights happens here, per token, so the same maths runs
//! against the offline n-gram scorer and the neural sidecar.

mod ngram;
pub mod protocol;
mod remote;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ngram::{lm_tokens, NgramConfig, NgramScorer};
pub use remote::{Endpoint, RemoteScorer};

use crate::corpus::Block;
use crate::embed::{EmbedError, Embedder, HashedBowEmbedder};
use crate::retrieval::{RetrievalError, RetrievalMode, RetrievedSet, StoryRetriever};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("scorer unavailable{}: {cause}", block_id.map(|b| format!(" (block {b})")).unwrap_or_default())]
    Unavailable { block_id: Option<u64>, cause: String },
    #[error("protocol error in field `{field}`: {detail}")]
    Protocol { field: String, detail: String },
    #[error("reference scorer needs a non-empty training corpus")]
    EmptyCorpus,
    #[error("invalid scorer configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

impl ScoringError {
    pub fn protocol(field: impl Into<String>, detail: impl Into<String>) -> Self {
        ScoringError::Protocol {
            field: field.into(),
            detail: detail.into(),
        }
    }

    fn at_block(self, id: u64) -> Self {
        match self {
            ScoringError::Unavailable { block_id: None, cause } => ScoringError::Unavailable {
                block_id: Some(id),
                cause,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, ScoringError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub context: String,
    /// Passage texts in retrieval order; empty means no retrieval.
    pub passages: Vec<String>,
    pub target: String,
    pub want_embedding: bool,
}

impl ScoreRequest {
    pub fn rows(&self) -> usize {
        self.passages.len().max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    /// `rows × token_count` natural-log probabilities, each ≤ 0.
    pub logprobs: Vec<Vec<f64>>,
    pub token_count: usize,
    /// `rows × d` pooled encoder states, when requested.
    pub embeddings: Option<Vec<Vec<f64>>>,
    pub fingerprint: String,
    #[serde(default)]
    pub truncated: bool,
}

impl ScoreResponse {
    /// Checks the shape contract against the request that produced it.
    pub fn validate(&self, request: &ScoreRequest) -> Result<()> {
        if self.logprobs.len() != request.rows() {
            return Err(ScoringError::protocol(
                "logprobs",
                format!("{} rows for {} passages", self.logprobs.len(), request.passages.len()),
            ));
        }
        for (r, row) in self.logprobs.iter().enumerate() {
            if row.len() != self.token_count {
                return Err(ScoringError::protocol(
                    "logprobs",
                    format!("row {r} has {} entries, token_count is {}", row.len(), self.token_count),
                ));
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite() || **v > 0.0) {
                return Err(ScoringError::protocol("logprobs", format!("row {r} contains {v}")));
            }
        }
        if request.want_embedding {
            let Some(emb) = &self.embeddings else {
                return Err(ScoringError::protocol("embeddings", "requested but missing"));
            };
            if emb.len() != request.rows() {
                return Err(ScoringError::protocol(
                    "embeddings",
                    format!("{} rows for {} passages", emb.len(), request.passages.len()),
                ));
            }
            let dim = emb.first().map_or(0, Vec::len);
            if emb.iter().any(|e| e.len() != dim || e.iter().any(|v| !v.is_finite())) {
                return Err(ScoringError::protocol("embeddings", "ragged or non-finite rows"));
            }
        }
        Ok(())
    }
}

/// Source of passage-conditioned target log-probabilities and embeddings.
pub trait Scorer: Send + Sync {
    /// Model identity plus configuration hash, stamped on every artifact.
    fn fingerprint(&self) -> String;

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse>;

    /// Sentence/passage embedding channel used for retrieval, clustering
    /// and alignment.
    fn embedder(&self) -> &dyn Embedder;
}

/// Per-token mixture `log Σ_z w_z · exp(logp[z][t])`, evaluated with a
/// max-shifted log-sum-exp. Zero-weight rows are skipped, so a one-hot
/// weight vector reproduces its row exactly.
pub fn marginalize(logprobs: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if logprobs.len() != weights.len() {
        return Err(ScoringError::Shape(format!(
            "{} rows but {} weights",
            logprobs.len(),
            weights.len()
        )));
    }
    if logprobs.is_empty() {
        return Err(ScoringError::Shape("no rows to marginalise".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(ScoringError::Shape(format!(
            "weights must be a distribution (sum {sum})"
        )));
    }
    let tokens = logprobs[0].len();
    if logprobs.iter().any(|row| row.len() != tokens) {
        return Err(ScoringError::Shape("ragged log-probability rows".into()));
    }
    let log_weights: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let mut out = Vec::with_capacity(tokens);
    let mut shifted = vec![0.0f64; logprobs.len()];
    for t in 0..tokens {
        let mut max = f64::NEG_INFINITY;
        for (z, row) in logprobs.iter().enumerate() {
            shifted[z] = log_weights[z] + row[t];
            max = max.max(shifted[z]);
        }
        let acc: f64 = shifted.iter().filter(|v| v.is_finite()).map(|v| (v - max).exp()).sum();
        out.push(max + acc.ln());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceResult {
    /// Mean marginal log-likelihood per target token.
    pub avg_log_likelihood: f64,
    pub token_count: usize,
    /// Weight-averaged per-passage embedding, when requested.
    pub pooled_embedding: Option<Vec<f64>>,
}

/// Coherence of `target` following `context` with the given passages.
pub fn coherence_texts(
    context: &str,
    target: &str,
    retrieved: &RetrievedSet,
    scorer: &dyn Scorer,
    want_embedding: bool,
) -> Result<CoherenceResult> {
    let request = ScoreRequest {
        context: context.to_string(),
        passages: retrieved.texts(),
        target: target.to_string(),
        want_embedding,
    };
    let weights = if retrieved.is_empty() {
        vec![1.0]
    } else {
        retrieved.weights()
    };
    let response = scorer.score(&request)?;
    response.validate(&request)?;
    if response.token_count == 0 {
        return Err(ScoringError::Shape("scorer reported an empty target".into()));
    }
    let marginal = marginalize(&response.logprobs, &weights)?;
    let avg = (marginal.iter().sum::<f64>() / response.token_count as f64).min(0.0);
    let pooled_embedding = if want_embedding {
        let rows = response.embeddings.as_ref().expect("validated");
        let dim = rows[0].len();
        let mut pooled = vec![0.0f64; dim];
        for (row, w) in rows.iter().zip(&weights) {
            for (p, v) in pooled.iter_mut().zip(row) {
                *p += w * v;
            }
        }
        Some(pooled)
    } else {
        None
    };
    Ok(CoherenceResult {
        avg_log_likelihood: avg,
        token_count: response.token_count,
        pooled_embedding,
    })
}

/// Coherence of a block's target given its context and retrieved passages.
pub fn coherence(
    block: &Block,
    retrieved: &RetrievedSet,
    scorer: &dyn Scorer,
    want_embedding: bool,
) -> Result<CoherenceResult> {
    if block.target.is_empty() {
        return Err(ScoringError::Shape(format!("block {} has no target", block.block_id)));
    }
    coherence_texts(
        &block.context_text(),
        &block.target_text(),
        retrieved,
        scorer,
        want_embedding,
    )
    .map_err(|e| e.at_block(block.block_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPerplexity {
    pub block_id: u64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianPerplexityReport {
    pub mode: RetrievalMode,
    pub median: f64,
    pub blocks: Vec<BlockPerplexity>,
}

/// Median of a non-empty slice (mean of the two middle values for even
/// lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Some(if sorted.len().is_multiple_of(2) {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    })
}

/// Per-block perplexity `exp(-avg log-likelihood)` under `mode`, scoring
/// blocks in order and memorising each after it is scored.
pub fn perplexity(
    blocks: &[Block],
    mode: RetrievalMode,
    scorer: &dyn Scorer,
    retriever: &mut StoryRetriever<'_>,
) -> Result<MedianPerplexityReport> {
    if blocks.is_empty() {
        return Err(ScoringError::Shape("perplexity needs at least one block".into()));
    }
    let mut out = Vec::with_capacity(blocks.len());
    for block in blocks {
        let retrieved = retriever.retrieve_block_with(block, mode)?;
        let c = coherence(block, &retrieved, scorer, false)?;
        out.push(BlockPerplexity {
            block_id: block.block_id,
            perplexity: (-c.avg_log_likelihood).exp(),
        });
        retriever.memorize(block)?;
    }
    let values: Vec<f64> = out.iter().map(|b| b.perplexity).collect();
    Ok(MedianPerplexityReport {
        mode,
        median: median(&values).expect("non-empty"),
        blocks: out,
    })
}

/// Assigns every target token probability `1/vocab`, whatever the context.
#[derive(Debug, Clone)]
pub struct UniformScorer {
    vocab: usize,
    embedder: HashedBowEmbedder,
}

impl UniformScorer {
    pub fn new(vocab: usize, dim: usize) -> Self {
        assert!(vocab > 0);
        UniformScorer {
            vocab,
            embedder: HashedBowEmbedder::new(dim),
        }
    }
}

impl Scorer for UniformScorer {
    fn fingerprint(&self) -> String {
        format!("uniform/v1 vocab={} dim={}", self.vocab, self.embedder.dim())
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse> {
        let t = lm_tokens(&request.target).len();
        let lp = -(self.vocab as f64).ln();
        let rows = request.rows();
        let embeddings = request.want_embedding.then(|| {
            let e = self.embedder.embed_text(&request.target);
            let row: Vec<f64> = e.as_slice().iter().map(|v| f64::from(*v)).collect();
            vec![row; rows]
        });
        Ok(ScoreResponse {
            logprobs: vec![vec![lp; t]; rows],
            token_count: t,
            embeddings,
            fingerprint: self.fingerprint(),
            truncated: false,
        })
    }

    fn embedder(&self) -> &dyn Embedder {
        &self.embedder
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_blocks, Chapter, WhitespaceTokenizer, WindowSpec};

    #[test]
    fn singleton_marginal_is_identity() {
        let out = marginalize(&[vec![-1.2, -0.3]], &[1.0]).unwrap();
        assert_eq!(out, vec![-1.2, -0.3]);
    }

    #[test]
    fn equal_weight_average() {
        let rows = vec![vec![0.2f64.ln()], vec![0.4f64.ln()]];
        let out = marginalize(&rows, &[0.5, 0.5]).unwrap();
        assert!((out[0] - 0.3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn one_hot_selects_row() {
        let rows = vec![vec![-1.0, -2.0], vec![-3.5, -0.25], vec![-0.1, -9.0]];
        assert_eq!(marginalize(&rows, &[0.0, 1.0, 0.0]).unwrap(), rows[1]);
    }

    #[test]
    fn marginalize_shape_errors() {
        assert!(matches!(
            marginalize(&[vec![-1.0]], &[0.5, 0.5]),
            Err(ScoringError::Shape(_))
        ));
        assert!(matches!(
            marginalize(&[vec![-1.0], vec![-1.0]], &[0.7, 0.7]),
            Err(ScoringError::Shape(_))
        ));
        assert!(matches!(
            marginalize(&[vec![-1.0], vec![-1.0, -2.0]], &[0.5, 0.5]),
            Err(ScoringError::Shape(_))
        ));
    }

    #[test]
    fn uniform_scorer_gives_log_v() {
        let chapter = Chapter::from_texts("c", "", &["a b c.", "d e f g.", "h i."], &WhitespaceTokenizer);
        let blocks = make_blocks(&chapter, &WindowSpec::default(), &WhitespaceTokenizer);
        let scorer = UniformScorer::new(16, 8);
        for block in &blocks {
            let c = coherence(block, &RetrievedSet::default(), &scorer, false).unwrap();
            assert!((c.avg_log_likelihood + 16f64.ln()).abs() < 1e-15);
            assert!(((-c.avg_log_likelihood).exp() - 16.0).abs() < 1e-9);
        }
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[10.0, 30.0, 20.0]), Some(20.0));
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), Some(2.5));
        assert_eq!(median(&[16.0]), Some(16.0));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn response_validation_names_fields() {
        let req = ScoreRequest {
            context: "c".into(),
            passages: vec!["p".into(), "q".into()],
            target: "t".into(),
            want_embedding: true,
        };
        let mut resp = ScoreResponse {
            logprobs: vec![vec![-1.0]],
            token_count: 1,
            embeddings: Some(vec![vec![0.0], vec![0.0]]),
            fingerprint: "f".into(),
            truncated: false,
        };
        let err = resp.validate(&req).unwrap_err();
        assert!(matches!(err, ScoringError::Protocol { ref field, .. } if field == "logprobs"));
        resp.logprobs = vec![vec![-1.0], vec![0.5]];
        assert!(resp.validate(&req).is_err());
        resp.logprobs = vec![vec![-1.0], vec![-0.5]];
        resp.embeddings = None;
        let err = resp.validate(&req).unwrap_err();
        assert!(matches!(err, ScoringError::Protocol { ref field, .. } if field == "embeddings"));
    }
}
