//! Offline reference scorer: an additive-smoothed word n-gram model with a
//! conditioning cache.
//!
//! Static counts come from a training corpus. On top of them, every n-gram
//! present in the conditioning text (retrieved passage followed by context)
//! adds a fixed pseudo-count `boost`:
//!
//! ```text
//! P(w | h) = (C(h, w) + boost·D(h, w) + α) / (C(h) + boost·D(h) + α·V)
//! ```
//!
//! where `D(h, w)` is 1 when the n-gram occurs in the conditioning text and
//! `D(h)` counts the distinct continuations of `h` there. Passage and
//! context are separate segments: no n-gram spans the seam between them.
//! Presence rather than frequency is used, so repeating a sentence adds
//! nothing. A unigram model (`order == 1`) has no history and ignores the
//! conditioning text entirely.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{Result, ScoreRequest, ScoreResponse, Scorer, ScoringError};
use crate::corpus::Story;
use crate::embed::{hash_bucket, l2_normalize, Embedder, HashedBowEmbedder};
use crate::hashing::{fnv1a_ids, sha256_hex};

const BOUNDARY: &str = ".";
const PAD_ID: u32 = u32::MAX;

/// Scorer-side tokenisation: lowercased words with edge punctuation stripped;
/// a word carrying terminal punctuation is followed by a `.` boundary token.
pub fn lm_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let ends_sentence = lower
            .trim_end_matches(['"', '\'', ')', ']', '\u{201d}', '\u{2019}'])
            .ends_with(['.', '!', '?']);
        let core = lower.trim_matches(|c: char| !c.is_alphanumeric());
        if !core.is_empty() {
            out.push(core.to_string());
        }
        if ends_sentence {
            out.push(BOUNDARY.to_string());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NgramConfig {
    pub order: usize,
    /// Additive smoothing α.
    pub smoothing: f64,
    /// Pseudo-count for n-grams present in the conditioning text.
    pub boost: f64,
    /// Embedding dimension.
    pub dim: usize,
}

impl Default for NgramConfig {
    fn default() -> Self {
        NgramConfig {
            order: 2,
            smoothing: 0.1,
            boost: 1.0,
            dim: 256,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NgramScorer {
    config: NgramConfig,
    vocab: HashMap<String, u32>,
    ngram_counts: HashMap<u64, u32>,
    history_counts: HashMap<u64, u32>,
    embedder: HashedBowEmbedder,
    fingerprint: String,
}

impl NgramScorer {
    /// Trains on every chapter of `corpus`; each chapter starts a fresh
    /// history.
    pub fn train(corpus: &[Story], config: NgramConfig) -> Result<Self> {
        if config.order == 0 {
            return Err(ScoringError::InvalidConfig("order must be >= 1".into()));
        }
        if !(config.smoothing > 0.0 && config.smoothing.is_finite()) {
            return Err(ScoringError::InvalidConfig("smoothing must be > 0".into()));
        }
        if !(config.boost >= 0.0 && config.boost.is_finite()) {
            return Err(ScoringError::InvalidConfig("boost must be >= 0".into()));
        }
        if config.dim == 0 {
            return Err(ScoringError::InvalidConfig("dim must be >= 1".into()));
        }
        let mut vocab: HashMap<String, u32> = HashMap::new();
        let mut ngram_counts: HashMap<u64, u32> = HashMap::new();
        let mut history_counts: HashMap<u64, u32> = HashMap::new();
        let mut digest_input: Vec<u8> = Vec::new();
        let hist_len = config.order - 1;
        let mut total_tokens = 0usize;
        for story in corpus {
            for chapter in &story.chapters {
                let mut ids: Vec<u32> = vec![PAD_ID; hist_len];
                for sentence in &chapter.sentences {
                    for tok in lm_tokens(&sentence.text) {
                        digest_input.extend_from_slice(tok.as_bytes());
                        digest_input.push(b' ');
                        let next = vocab.len() as u32;
                        ids.push(*vocab.entry(tok).or_insert(next));
                    }
                }
                digest_input.push(b'\n');
                for i in hist_len..ids.len() {
                    let gram = &ids[i - hist_len..=i];
                    *ngram_counts.entry(fnv1a_ids(gram)).or_default() += 1;
                    *history_counts.entry(fnv1a_ids(&gram[..hist_len])).or_default() += 1;
                    total_tokens += 1;
                }
            }
        }
        if total_tokens == 0 {
            return Err(ScoringError::EmptyCorpus);
        }
        let fingerprint = format!(
            "ngram-ref/v1 order={} smoothing={} boost={} dim={} corpus={}",
            config.order,
            config.smoothing,
            config.boost,
            config.dim,
            &sha256_hex(&digest_input)[..16]
        );
        Ok(NgramScorer {
            config,
            vocab,
            ngram_counts,
            history_counts,
            embedder: HashedBowEmbedder::new(config.dim),
            fingerprint,
        })
    }

    pub fn config(&self) -> &NgramConfig {
        &self.config
    }

    /// Vocabulary size including one slot for unseen words.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len() + 1
    }

    /// Log-probability of each token of `target` after `conditioning`, which
    /// is both the history source and the cache.
    pub fn token_logprobs(&self, conditioning: &str, target: &str) -> Vec<f64> {
        let mut interner = Interner::new(&self.vocab);
        let cond: Vec<u32> = lm_tokens(conditioning).iter().map(|t| interner.id(t)).collect();
        let tgt: Vec<u32> = lm_tokens(target).iter().map(|t| interner.id(t)).collect();
        self.row(&[], &cond, &tgt).0
    }

    /// Scores `target` against `passage ++ context`, returning per-token
    /// log-probs and probabilities.
    fn row(&self, passage: &[u32], context: &[u32], target: &[u32]) -> (Vec<f64>, Vec<f64>) {
        let h = self.config.order - 1;
        let mut stream: Vec<u32> = Vec::with_capacity(2 * h + passage.len() + context.len() + target.len());
        stream.extend(std::iter::repeat_n(PAD_ID, h));
        stream.extend_from_slice(passage);
        // Restart the history so no n-gram spans the passage/context seam.
        stream.extend(std::iter::repeat_n(PAD_ID, h));
        stream.extend_from_slice(context);
        let cond_end = stream.len();
        stream.extend_from_slice(target);

        // Histories that occur at target positions; only those need cache counts.
        let target_histories: HashSet<u64> = (cond_end..stream.len()).map(|i| fnv1a_ids(&stream[i - h..i])).collect();
        let mut present: HashMap<u64, HashSet<u32>> = HashMap::new();
        if h > 0 && self.config.boost > 0.0 {
            for i in h..cond_end {
                if stream[i] == PAD_ID {
                    continue;
                }
                let key = fnv1a_ids(&stream[i - h..i]);
                if target_histories.contains(&key) {
                    present.entry(key).or_default().insert(stream[i]);
                }
            }
        }

        let alpha = self.config.smoothing;
        let beta = self.config.boost;
        let v = self.vocab_size() as f64;
        let mut logprobs = Vec::with_capacity(target.len());
        let mut probs = Vec::with_capacity(target.len());
        for i in cond_end..stream.len() {
            let hist = &stream[i - h..i];
            let w = stream[i];
            let hist_key = fnv1a_ids(hist);
            let gram_key = fnv1a_ids(&stream[i - h..=i]);
            let c_hw = f64::from(self.ngram_counts.get(&gram_key).copied().unwrap_or(0));
            let c_h = f64::from(self.history_counts.get(&hist_key).copied().unwrap_or(0));
            let (d_hw, d_h) = match present.get(&hist_key) {
                Some(set) => (f64::from(u8::from(set.contains(&w))), set.len() as f64),
                None => (0.0, 0.0),
            };
            let p = (c_hw + beta * d_hw + alpha) / (c_h + beta * d_h + alpha * v);
            logprobs.push(p.ln().min(0.0));
            probs.push(p);
        }
        (logprobs, probs)
    }

    fn row_embedding(&self, target_tokens: &[String], probs: &[f64]) -> Vec<f64> {
        let dim = self.config.dim;
        let mut v = vec![0.0f64; dim];
        for (tok, p) in target_tokens.iter().zip(probs) {
            let (bucket, sign) = hash_bucket(tok, dim);
            v[bucket] += sign * p;
        }
        l2_normalize(&mut v);
        v
    }
}

/// Maps tokens to ids, giving unseen words request-local ids above the
/// trained vocabulary.
struct Interner<'a> {
    vocab: &'a HashMap<String, u32>,
    local: HashMap<String, u32>,
}

impl<'a> Interner<'a> {
    fn new(vocab: &'a HashMap<String, u32>) -> Self {
        Interner {
            vocab,
            local: HashMap::new(),
        }
    }

    fn id(&mut self, tok: &str) -> u32 {
        if let Some(id) = self.vocab.get(tok) {
            return *id;
        }
        let next = (self.vocab.len() + self.local.len()) as u32;
        *self.local.entry(tok.to_string()).or_insert(next)
    }
}

impl Scorer for NgramScorer {
    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    /// One row per passage; the conditioning text of a row is the passage
    /// followed by the context, and no passages means a single row with an
    /// empty passage.
    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse> {
        let mut interner = Interner::new(&self.vocab);
        let context: Vec<u32> = lm_tokens(&request.context).iter().map(|t| interner.id(t)).collect();
        let target_tokens = lm_tokens(&request.target);
        let target: Vec<u32> = target_tokens.iter().map(|t| interner.id(t)).collect();
        let passages: Vec<Vec<u32>> = if request.passages.is_empty() {
            vec![Vec::new()]
        } else {
            request
                .passages
                .iter()
                .map(|p| lm_tokens(p).iter().map(|t| interner.id(t)).collect())
                .collect()
        };
        let mut logprobs = Vec::with_capacity(passages.len());
        let mut embeddings = request.want_embedding.then(|| Vec::with_capacity(passages.len()));
        for passage in &passages {
            let (lp, probs) = self.row(passage, &context, &target);
            if let Some(rows) = embeddings.as_mut() {
                rows.push(self.row_embedding(&target_tokens, &probs));
            }
            logprobs.push(lp);
        }
        Ok(ScoreResponse {
            logprobs,
            token_count: target.len(),
            embeddings,
            fingerprint: self.fingerprint.clone(),
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
    use crate::corpus::{Chapter, WhitespaceTokenizer};

    fn story(texts: &[&str]) -> Story {
        Story {
            story_id: "s".into(),
            title: "s".into(),
            chapters: vec![Chapter::from_texts("c", "", texts, &WhitespaceTokenizer)],
        }
    }

    fn cfg(order: usize) -> NgramConfig {
        NgramConfig {
            order,
            ..NgramConfig::default()
        }
    }

    #[test]
    fn tokenisation() {
        assert_eq!(lm_tokens("A b. \"C,\" d!"), vec!["a", "b", ".", "c", "d", "."]);
        assert_eq!(lm_tokens("Yes...\u{201d} no"), vec!["yes", ".", "no"]);
        assert!(lm_tokens("  ").is_empty());
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            NgramScorer::train(&[], cfg(2)),
            Err(ScoringError::EmptyCorpus)
        ));
        let bad = NgramConfig {
            smoothing: 0.0,
            ..cfg(2)
        };
        assert!(matches!(
            NgramScorer::train(&[story(&["a"])], bad),
            Err(ScoringError::InvalidConfig(_))
        ));
    }

    #[test]
    fn bigram_counts_by_hand() {
        // tokens: a b a b a b  (no terminal punctuation)
        let s = NgramScorer::train(&[story(&["a b a b a b"])], cfg(2)).unwrap();
        let alpha = 0.1;
        let v = 3.0; // {a, b} + unseen
                     // history "a": seen 3 times, always followed by b
        let p_b_after_a: f64 = (3.0 + alpha) / (3.0 + alpha * v);
        let p_a_after_a: f64 = (0.0 + alpha) / (3.0 + alpha * v);
        let lp = s.token_logprobs("a", "b");
        assert!((lp[0] - p_b_after_a.ln()).abs() < 1e-12);
        let lp = s.token_logprobs("a", "a");
        assert!((lp[0] - p_a_after_a.ln()).abs() < 1e-12);
        assert!(p_b_after_a > p_a_after_a);
    }

    #[test]
    fn unigram_ignores_conditioning() {
        let s = NgramScorer::train(&[story(&["x y z.", "y z."])], cfg(1)).unwrap();
        let a = s.token_logprobs("", "y z q.");
        let b = s.token_logprobs("q q q. y z. totally different", "y z q.");
        assert_eq!(a, b);
    }

    #[test]
    fn cache_counts_presence_once() {
        let s = NgramScorer::train(&[story(&["a b c d e f."])], cfg(2)).unwrap();
        let once = s.token_logprobs("x y. q r.", "q r.");
        let twice = s.token_logprobs("x y. q r. q r.", "q r.");
        assert_eq!(once, twice);
        let without = s.token_logprobs("x y.", "q r.");
        assert!(once[1] > without[1]);
    }

    #[test]
    fn empty_passage_equals_no_passages() {
        let s = NgramScorer::train(&[story(&["a b c.", "c b a."])], cfg(2)).unwrap();
        let base = ScoreRequest {
            context: "a b.".into(),
            passages: vec![],
            target: "c b a.".into(),
            want_embedding: true,
        };
        let with_empty = ScoreRequest {
            passages: vec![String::new()],
            ..base.clone()
        };
        assert_eq!(s.score(&base).unwrap(), s.score(&with_empty).unwrap());
    }

    #[test]
    fn rows_follow_passages() {
        let s = NgramScorer::train(&[story(&["a b c.", "c b a."])], cfg(2)).unwrap();
        let req = ScoreRequest {
            context: "a.".into(),
            passages: vec!["b c.".into(), "zz yy.".into(), "b c.".into()],
            target: "b c.".into(),
            want_embedding: true,
        };
        let resp = s.score(&req).unwrap();
        resp.validate(&req).unwrap();
        assert_eq!(resp.logprobs.len(), 3);
        assert_ne!(resp.logprobs[0], resp.logprobs[1]);
        assert_eq!(resp.logprobs[0], resp.logprobs[2]);
        assert_eq!(resp, s.score(&req).unwrap());
    }
}
