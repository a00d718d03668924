//! Salience measures over a chapter.
//!
//! Most measures compare the coherence of a block's target under the intact
//! context against a manipulated one: sentence `t` deleted from the end of
//! the context (Like-Sal and friends), sentences `t` and `t+1` swapped
//! (Swap-Sal), retrieval switched off (Know-Sal), or the same comparison in
//! embedding space (Emb-Sal). A chapter is profiled in one pass over its
//! blocks in order, memorising each block once it has been scored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::baselines::{cluster_salience, positional_baseline, ClusterConfig, PositionalKind};
use crate::corpus::{make_blocks_at, Block, Chapter, Story, Tokenizer, WindowSpec};
use crate::embed::{cosine_distance, EmbedError};
use crate::hashing::derive_seed;
use crate::retrieval::{
    KnowledgeBase, MemoryCache, RetrievalConfig, RetrievalDump, RetrievalError, RetrievedSet, StoryRetriever,
};
use crate::scoring::{coherence, CoherenceResult, Scorer, ScoringError};
use crate::sentiment::{sentiment_adjust, SentimentProvider};

#[derive(Debug, Error)]
pub enum SalienceError {
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown measure `{0}`")]
    UnknownMeasure(String),
    #[error("invalid salience record on line {line}: {reason}")]
    InvalidRecord { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, SalienceError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MeasureId {
    ClusSal,
    LikeSal,
    NoKnowSal,
    LikeImpSal,
    LikeClusSal,
    LikeClusImpSal,
    KnowSal,
    SwapSal,
    EmbSurp,
    EmbSal,
    Random,
    Ascending,
    Descending,
}

impl MeasureId {
    pub const ALL: [MeasureId; 13] = [
        MeasureId::ClusSal,
        MeasureId::LikeSal,
        MeasureId::NoKnowSal,
        MeasureId::LikeImpSal,
        MeasureId::LikeClusSal,
        MeasureId::LikeClusImpSal,
        MeasureId::KnowSal,
        MeasureId::SwapSal,
        MeasureId::EmbSurp,
        MeasureId::EmbSal,
        MeasureId::Random,
        MeasureId::Ascending,
        MeasureId::Descending,
    ];

    /// Serialised name.
    pub fn name(self) -> &'static str {
        match self {
            MeasureId::ClusSal => "Clus-Sal",
            MeasureId::LikeSal => "Like-Sal",
            MeasureId::NoKnowSal => "No-Know-Sal",
            MeasureId::LikeImpSal => "Like-Imp-Sal",
            MeasureId::LikeClusSal => "Like-Clus-Sal",
            MeasureId::LikeClusImpSal => "Like-Clus-Imp-Sal",
            MeasureId::KnowSal => "Know-Sal",
            MeasureId::SwapSal => "Swap-Sal",
            MeasureId::EmbSurp => "Emb-Surp",
            MeasureId::EmbSal => "Emb-Sal",
            MeasureId::Random => "Random",
            MeasureId::Ascending => "Ascending",
            MeasureId::Descending => "Descending",
        }
    }

    /// Whether computing the measure calls the scorer.
    pub fn uses_scorer(self) -> bool {
        !matches!(
            self,
            MeasureId::ClusSal | MeasureId::Random | MeasureId::Ascending | MeasureId::Descending
        )
    }

    fn uses_deletion(self) -> bool {
        matches!(
            self,
            MeasureId::LikeSal
                | MeasureId::LikeImpSal
                | MeasureId::LikeClusSal
                | MeasureId::LikeClusImpSal
                | MeasureId::EmbSal
        )
    }

    fn uses_clusters(self) -> bool {
        matches!(
            self,
            MeasureId::ClusSal | MeasureId::LikeClusSal | MeasureId::LikeClusImpSal
        )
    }
}

impl fmt::Display for MeasureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MeasureId {
    type Err = SalienceError;

    /// Accepts the serialised names case-insensitively, with `_` for `-`,
    /// plus the alias `Know-Diff-Sal`.
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        if key == "know-diff-sal" {
            return Ok(MeasureId::KnowSal);
        }
        MeasureId::ALL
            .into_iter()
            .find(|m| m.name().to_ascii_lowercase() == key)
            .ok_or_else(|| SalienceError::UnknownMeasure(s.to_string()))
    }
}

impl Serialize for MeasureId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for MeasureId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses a comma-separated measure list; `all` selects every measure.
pub fn parse_measures(list: &str) -> Result<BTreeSet<MeasureId>> {
    let mut out = BTreeSet::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if item.eq_ignore_ascii_case("all") {
            out.extend(MeasureId::ALL);
        } else {
            out.insert(item.parse()?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalienceProfile {
    pub story_id: String,
    pub chapter_id: String,
    /// One score per sentence for every computed measure.
    pub scores: BTreeMap<MeasureId, Vec<f64>>,
    #[serde(rename = "fingerprint")]
    pub scorer_fingerprint: String,
    pub config_hash: String,
}

impl SalienceProfile {
    pub fn sentence_count(&self) -> Option<usize> {
        self.scores.values().next().map(Vec::len)
    }

    /// Serialises as one JSON line.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("profile scores are finite")
    }

    pub fn check(&self) -> Result<()> {
        let n = self.sentence_count().unwrap_or(0);
        for (m, v) in &self.scores {
            if v.len() != n {
                return Err(SalienceError::Shape(format!(
                    "{m} has {} scores, expected {n}",
                    v.len()
                )));
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(SalienceError::Shape(format!("{m} score {i} is not finite")));
            }
        }
        Ok(())
    }
}

/// Reads salience JSONL (blank lines ignored).
pub fn read_profiles<R: std::io::BufRead>(reader: R) -> Result<Vec<SalienceProfile>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SalienceError::InvalidRecord {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let profile: SalienceProfile = serde_json::from_str(&line).map_err(|e| SalienceError::InvalidRecord {
            line: i + 1,
            reason: e.to_string(),
        })?;
        profile.check().map_err(|e| SalienceError::InvalidRecord {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(profile);
    }
    Ok(out)
}

/// The block with its newest context sentence (sentence `t`) removed.
pub fn deleted_block(block: &Block) -> Block {
    let mut out = block.clone();
    out.context.pop();
    out
}

/// The block with its two newest context sentences exchanged, when both are
/// present.
pub fn swapped_block(block: &Block) -> Option<Block> {
    let n = block.context.len();
    if n < 2 {
        return None;
    }
    let mut out = block.clone();
    out.context.swap(n - 2, n - 1);
    Some(out)
}

/// Coherence with sentence `t` present minus with it deleted, both under
/// the same retrieved passages.
pub fn deletion_salience(block: &Block, retrieved: &RetrievedSet, scorer: &dyn Scorer) -> Result<f64> {
    let present = coherence(block, retrieved, scorer, false)?;
    let deleted = coherence(&deleted_block(block), retrieved, scorer, false)?;
    Ok(present.avg_log_likelihood - deleted.avg_log_likelihood)
}

/// Swap salience of the sentence before the frame's last context sentence.
/// `frame` is the block at `t + 1`; returns 0 when the frame's context does
/// not hold both sentences.
pub fn swap_salience(frame: &Block, retrieved: &RetrievedSet, scorer: &dyn Scorer) -> Result<f64> {
    let Some(swapped) = swapped_block(frame) else {
        return Ok(0.0);
    };
    let present = coherence(frame, retrieved, scorer, false)?;
    let swapped = coherence(&swapped, retrieved, scorer, false)?;
    Ok(present.avg_log_likelihood - swapped.avg_log_likelihood)
}

/// Coherence with the retrieved passages minus coherence with none.
pub fn knowledge_salience(block: &Block, retrieved: &RetrievedSet, scorer: &dyn Scorer) -> Result<f64> {
    let with = coherence(block, retrieved, scorer, false)?;
    let without = coherence(block, &RetrievedSet::default(), scorer, false)?;
    Ok(with.avg_log_likelihood - without.avg_log_likelihood)
}

fn pooled(c: &CoherenceResult) -> &[f64] {
    c.pooled_embedding.as_deref().expect("requested with want_embedding")
}

/// Cosine distance between the pooled embeddings of the intact and deleted
/// evaluations.
pub fn embedding_salience(block: &Block, retrieved: &RetrievedSet, scorer: &dyn Scorer) -> Result<f64> {
    let present = coherence(block, retrieved, scorer, true)?;
    let deleted = coherence(&deleted_block(block), retrieved, scorer, true)?;
    Ok(cosine_distance(pooled(&present), pooled(&deleted)))
}

/// Cosine distance between consecutive pooled block embeddings; the first
/// entry is 0.
pub fn ely_surprise(embeddings: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; embeddings.len()];
    for t in 1..embeddings.len() {
        out[t] = cosine_distance(&embeddings[t], &embeddings[t - 1]);
    }
    out
}

/// Mean 0, sd 1 (population sd). A constant vector maps to zeros.
pub fn z_normalize(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd == 0.0 || !sd.is_finite() {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / sd).collect()
}

/// `z(clus) + 2 z(like)` with per-chapter z-normalisation.
pub fn combine_like_clus(like: &[f64], clus: &[f64]) -> Result<Vec<f64>> {
    if like.len() != clus.len() {
        return Err(SalienceError::Shape(format!(
            "like has {} scores, clus has {}",
            like.len(),
            clus.len()
        )));
    }
    Ok(z_normalize(clus)
        .into_iter()
        .zip(z_normalize(like))
        .map(|(c, l)| c + 2.0 * l)
        .collect())
}

/// Everything besides the scorer and retrieval state that a profile run
/// depends on.
pub struct ProfileSettings<'a> {
    pub measures: BTreeSet<MeasureId>,
    pub window: WindowSpec,
    pub cluster: ClusterConfig,
    pub seed: u64,
    pub config_hash: String,
    pub tokenizer: &'a dyn Tokenizer,
    pub sentiment: &'a dyn SentimentProvider,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChapterOutput {
    pub profile: SalienceProfile,
    /// Retrieval under the configured mode, one entry per scored block.
    pub retrieval: Vec<RetrievalDump>,
}

#[derive(Default)]
struct PassScores {
    like: Vec<f64>,
    no_know: Vec<f64>,
    know: Vec<f64>,
    swap: Vec<f64>,
    emb_sal: Vec<f64>,
    emb_surp: Vec<f64>,
    dumps: Vec<RetrievalDump>,
}

fn scorer_pass(
    chapter: &Chapter,
    first_block_id: u64,
    retriever: &mut StoryRetriever<'_>,
    scorer: &dyn Scorer,
    settings: &ProfileSettings<'_>,
) -> Result<PassScores> {
    let m = &settings.measures;
    let n = chapter.len();
    let want_deletion = m.iter().any(|x| x.uses_deletion());
    let want_embedding = m.contains(&MeasureId::EmbSal) || m.contains(&MeasureId::EmbSurp);
    let want_off = m.contains(&MeasureId::NoKnowSal) || m.contains(&MeasureId::KnowSal);
    let off = RetrievedSet::default();

    let mut s = PassScores {
        like: vec![0.0; n],
        no_know: vec![0.0; n],
        know: vec![0.0; n],
        swap: vec![0.0; n],
        emb_sal: vec![0.0; n],
        emb_surp: vec![0.0; n],
        dumps: Vec::new(),
    };
    let mut pooled_by_pos: Vec<Option<Vec<f64>>> = vec![None; n];
    for block in make_blocks_at(chapter, &settings.window, settings.tokenizer, first_block_id) {
        let t = block.position;
        let retrieved = retriever.retrieve_block(&block)?;
        let present = coherence(&block, &retrieved, scorer, want_embedding)?;
        if want_deletion {
            let deleted = coherence(&deleted_block(&block), &retrieved, scorer, want_embedding)?;
            s.like[t] = present.avg_log_likelihood - deleted.avg_log_likelihood;
            if want_embedding {
                s.emb_sal[t] = cosine_distance(pooled(&present), pooled(&deleted));
            }
        }
        if want_off {
            let present_off = coherence(&block, &off, scorer, false)?;
            s.know[t] = present.avg_log_likelihood - present_off.avg_log_likelihood;
            if m.contains(&MeasureId::NoKnowSal) {
                let deleted_off = coherence(&deleted_block(&block), &off, scorer, false)?;
                s.no_know[t] = present_off.avg_log_likelihood - deleted_off.avg_log_likelihood;
            }
        }
        if m.contains(&MeasureId::SwapSal) && t >= 1 {
            if let Some(swapped) = swapped_block(&block) {
                let c = coherence(&swapped, &retrieved, scorer, false)?;
                s.swap[t - 1] = present.avg_log_likelihood - c.avg_log_likelihood;
            }
        }
        pooled_by_pos[t] = present.pooled_embedding;
        s.dumps.push(retrieved.dump(block.block_id));
        retriever.memorize(&block)?;
    }
    if m.contains(&MeasureId::EmbSurp) {
        for t in 1..n {
            if let (Some(a), Some(b)) = (&pooled_by_pos[t], &pooled_by_pos[t - 1]) {
                s.emb_surp[t] = cosine_distance(a, b);
            }
        }
    }
    Ok(s)
}

/// Profiles one chapter. `retriever` carries the story's memory, which this
/// call extends with the chapter's blocks in order.
pub fn profile_chapter(
    story_id: &str,
    chapter: &Chapter,
    first_block_id: u64,
    retriever: &mut StoryRetriever<'_>,
    scorer: &dyn Scorer,
    settings: &ProfileSettings<'_>,
) -> Result<ChapterOutput> {
    let m = &settings.measures;
    let n = chapter.len();
    let pass = if m.iter().any(|x| x.uses_scorer()) {
        scorer_pass(chapter, first_block_id, retriever, scorer, settings)?
    } else {
        PassScores::default()
    };
    let texts: Vec<&str> = chapter.sentences.iter().map(|s| s.text.as_str()).collect();
    let clus = if m.iter().any(|x| x.uses_clusters()) {
        let emb = scorer.embedder().embed_batch(&texts)?;
        let emb: Vec<Vec<f64>> = emb
            .iter()
            .map(|e| e.as_slice().iter().map(|&v| f64::from(v)).collect())
            .collect();
        let cfg = ClusterConfig {
            seed: derive_seed(settings.seed, &[story_id, &chapter.chapter_id, "clus"], 0),
            ..settings.cluster
        };
        cluster_salience(&emb, &cfg)
    } else {
        Vec::new()
    };
    let like_imp = || sentiment_adjust(&pass.like, &texts, settings.sentiment);

    let mut scores = BTreeMap::new();
    for &measure in m {
        let v = match measure {
            MeasureId::ClusSal => clus.clone(),
            MeasureId::LikeSal => pass.like.clone(),
            MeasureId::NoKnowSal => pass.no_know.clone(),
            MeasureId::LikeImpSal => like_imp(),
            MeasureId::LikeClusSal => combine_like_clus(&pass.like, &clus)?,
            MeasureId::LikeClusImpSal => combine_like_clus(&like_imp(), &clus)?,
            MeasureId::KnowSal => pass.know.clone(),
            MeasureId::SwapSal => pass.swap.clone(),
            MeasureId::EmbSurp => pass.emb_surp.clone(),
            MeasureId::EmbSal => pass.emb_sal.clone(),
            MeasureId::Random => positional_baseline(
                n,
                PositionalKind::Random,
                derive_seed(settings.seed, &[story_id, &chapter.chapter_id, "random"], 0),
            ),
            MeasureId::Ascending => positional_baseline(n, PositionalKind::Ascending, 0),
            MeasureId::Descending => positional_baseline(n, PositionalKind::Descending, 0),
        };
        scores.insert(measure, v);
    }
    let profile = SalienceProfile {
        story_id: story_id.to_string(),
        chapter_id: chapter.chapter_id.clone(),
        scores,
        scorer_fingerprint: scorer.fingerprint(),
        config_hash: settings.config_hash.clone(),
    };
    profile.check()?;
    Ok(ChapterOutput {
        profile,
        retrieval: pass.dumps,
    })
}

/// Profiles every chapter of a story in order with a fresh memory cache.
pub fn profile_story(
    story: &Story,
    kb: &KnowledgeBase,
    cache: MemoryCache,
    scorer: &dyn Scorer,
    retrieval: RetrievalConfig,
    settings: &ProfileSettings<'_>,
) -> Result<Vec<ChapterOutput>> {
    let embedder = scorer.embedder();
    let mut retriever = StoryRetriever::new(story.story_id.clone(), kb, cache, embedder, retrieval);
    story
        .chapters
        .iter()
        .enumerate()
        .map(|(i, chapter)| {
            profile_chapter(
                &story.story_id,
                chapter,
                story.sentence_offset(i),
                &mut retriever,
                scorer,
                settings,
            )
        })
        .collect()
}
