//! Silver salience labels from summary-to-text alignment.
//!
//! Each summary sentence is mapped to a proportional position in the full
//! text and compared, by embedding cosine similarity, with the full-text
//! sentences in a window around that position. Sentences that are close
//! enough to the best match in the window become salient.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine_similarity, EmbedError, Embedder};

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("invalid alignment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("paired corpus line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("alignment labels: {0}")]
    Labels(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AlignmentError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    /// Half-width of the search window as a fraction of the full text.
    pub window_fraction: f64,
    pub min_similarity: f64,
    /// Largest allowed drop below the best similarity in the window.
    pub max_drop: f64,
    pub max_targets: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            window_fraction: 0.10,
            min_similarity: 0.35,
            max_drop: 0.05,
            max_targets: 3,
        }
    }
}

/// Slack for comparing similarities against thresholds, so that a value
/// equal to a threshold in exact arithmetic is not lost to rounding in `max - drop`.
const THRESHOLD_EPS: f64 = 1e-12;

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AlignmentError::InvalidConfig(m.to_string()));
        if !(self.window_fraction > 0.0 && self.window_fraction <= 1.0) {
            return bad("window fraction must be in (0, 1]");
        }
        if !(self.min_similarity > 0.0 && self.min_similarity < 1.0) {
            return bad("minimum similarity must be in (0, 1)");
        }
        if !(self.max_drop >= 0.0 && self.max_drop < 1.0) {
            return bad("maximum drop must be in [0, 1)");
        }
        if self.max_targets == 0 {
            return bad("max targets must be at least 1");
        }
        Ok(())
    }

    /// Window half-width `ceil(ρ·|F|)` in sentences.
    pub fn half_width(&self, full_len: usize) -> usize {
        (self.window_fraction * full_len as f64 - 1e-9).ceil().max(0.0) as usize
    }
}

/// Proportional anchor `round(i / |S| · |F|)`, clamped to a valid index.
pub fn anchor(i: usize, summary_len: usize, full_len: usize) -> usize {
    let a = (i as f64 / summary_len as f64 * full_len as f64).round() as usize;
    a.min(full_len.saturating_sub(1))
}

/// Inclusive window bounds around the anchor for summary sentence `i`.
pub fn window(i: usize, summary_len: usize, full_len: usize, config: &AlignmentConfig) -> (usize, usize) {
    let a = anchor(i, summary_len, full_len);
    let w = config.half_width(full_len);
    (a.saturating_sub(w), (a + w).min(full_len - 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub index: usize,
    pub score: f64,
}

/// Alignments for every summary sentence, given a similarity function over
/// (summary index, full-text index).
pub fn align_by<F>(summary_len: usize, full_len: usize, config: &AlignmentConfig, sim: F) -> Vec<Vec<Alignment>>
where
    F: Fn(usize, usize) -> f64,
{
    if full_len == 0 {
        return vec![Vec::new(); summary_len];
    }
    (0..summary_len)
        .map(|i| {
            let (lo, hi) = window(i, summary_len, full_len, config);
            let mut cands: Vec<Alignment> = (lo..=hi)
                .map(|j| Alignment {
                    index: j,
                    score: sim(i, j),
                })
                .collect();
            let window_max = cands.iter().map(|c| c.score).fold(f64::NEG_INFINITY, f64::max);
            cands.retain(|c| {
                c.score + THRESHOLD_EPS >= config.min_similarity
                    && c.score + THRESHOLD_EPS >= window_max - config.max_drop
            });
            cands.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
            cands.truncate(config.max_targets);
            cands
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentenceLabel {
    pub salient: bool,
    pub salience_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SilverLabelSet {
    pub chapter_id: String,
    pub summary: Vec<String>,
    pub full_text: Vec<String>,
    pub labels: Vec<SentenceLabel>,
    /// Per summary sentence.
    pub alignments: Vec<Vec<Alignment>>,
}

impl SilverLabelSet {
    pub fn salient_count(&self) -> usize {
        self.labels.iter().filter(|l| l.salient).count()
    }

    pub fn salient_flags(&self) -> Vec<bool> {
        self.labels.iter().map(|l| l.salient).collect()
    }
}

/// Marks every aligned sentence salient with its best similarity.
pub fn labels_from_alignments(full_len: usize, alignments: &[Vec<Alignment>]) -> Vec<SentenceLabel> {
    let mut labels = vec![
        SentenceLabel {
            salient: false,
            salience_score: 0.0,
        };
        full_len
    ];
    for a in alignments.iter().flatten() {
        let l = &mut labels[a.index];
        l.salience_score = if l.salient {
            l.salience_score.max(a.score)
        } else {
            a.score
        };
        l.salient = true;
    }
    labels
}

fn to_f64(e: &crate::embed::Embedding) -> Vec<f64> {
    e.as_slice().iter().map(|&v| f64::from(v)).collect()
}

pub fn align_chapter<S: AsRef<str>>(
    chapter_id: &str,
    summary: &[S],
    full_text: &[S],
    embedder: &dyn Embedder,
    config: &AlignmentConfig,
) -> Result<SilverLabelSet> {
    config.validate()?;
    let summary: Vec<&str> = summary.iter().map(AsRef::as_ref).collect();
    let full: Vec<&str> = full_text.iter().map(AsRef::as_ref).collect();
    let se: Vec<Vec<f64>> = embedder.embed_batch(&summary)?.iter().map(to_f64).collect();
    let fe: Vec<Vec<f64>> = embedder.embed_batch(&full)?.iter().map(to_f64).collect();
    let alignments = align_by(se.len(), fe.len(), config, |i, j| {
        cosine_similarity(&se[i], &fe[j]).unwrap_or(0.0)
    });
    Ok(SilverLabelSet {
        chapter_id: chapter_id.to_string(),
        labels: labels_from_alignments(full.len(), &alignments),
        summary: summary.iter().map(|s| s.to_string()).collect(),
        full_text: full.iter().map(|s| s.to_string()).collect(),
        alignments,
    })
}

/// A sentence given either as a bare string or as `{"index", "text"}`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum SentenceField {
    Text(String),
    Record { text: String },
}

impl SentenceField {
    fn into_text(self) -> String {
        match self {
            SentenceField::Text(t) | SentenceField::Record { text: t } => t,
        }
    }
}

#[derive(Debug, Deserialize)]
struct PairedLine {
    chapter_id: String,
    #[serde(default)]
    summary_sentences: Option<Vec<SentenceField>>,
    #[serde(default)]
    full_text_sentences: Option<Vec<SentenceField>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedChapter {
    pub chapter_id: String,
    /// `None` when the line carried no summary.
    pub summary: Option<Vec<String>>,
    pub full_text: Vec<String>,
}

pub fn parse_paired_line(line: &str, line_no: usize) -> Result<PairedChapter> {
    let p: PairedLine = serde_json::from_str(line).map_err(|source| AlignmentError::Json { line: line_no, source })?;
    Ok(PairedChapter {
        chapter_id: p.chapter_id,
        summary: p
            .summary_sentences
            .map(|v| v.into_iter().map(SentenceField::into_text).collect()),
        full_text: p
            .full_text_sentences
            .unwrap_or_default()
            .into_iter()
            .map(SentenceField::into_text)
            .collect(),
    })
}

pub fn read_paired<R: BufRead>(reader: R) -> Result<Vec<PairedChapter>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_paired_line(&line, i + 1)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub chapters: usize,
    pub labels: usize,
    pub mean_sentences: f64,
    pub mean_salient: f64,
    /// Chapters skipped for lacking a summary or full text.
    pub skipped: Vec<String>,
}

/// Aligns every chapter that has both a summary and a full text.
pub fn label_corpus(
    corpus: &[PairedChapter],
    embedder: &dyn Embedder,
    config: &AlignmentConfig,
) -> Result<(Vec<SilverLabelSet>, CorpusStats)> {
    config.validate()?;
    let mut sets = Vec::new();
    let mut stats = CorpusStats::default();
    for ch in corpus {
        match &ch.summary {
            Some(summary) if !summary.is_empty() && !ch.full_text.is_empty() => {
                sets.push(align_chapter(&ch.chapter_id, summary, &ch.full_text, embedder, config)?);
            }
            _ => {
                log::warn!("chapter {} has no summary/full-text pair; skipped", ch.chapter_id);
                stats.skipped.push(ch.chapter_id.clone());
            }
        }
    }
    stats.chapters = sets.len();
    stats.labels = sets.iter().map(SilverLabelSet::salient_count).sum();
    if !sets.is_empty() {
        let n = sets.len() as f64;
        stats.mean_sentences = sets.iter().map(|s| s.full_text.len()).sum::<usize>() as f64 / n;
        stats.mean_salient = stats.labels as f64 / n;
    }
    Ok((sets, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedText {
    pub index: usize,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub index: usize,
    pub text: String,
    pub alignments: Vec<AlignedText>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullTextEntry {
    pub index: usize,
    pub text: String,
    pub salient: bool,
    pub salience_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChapterDoc {
    pub chapter_id: String,
    pub summary: Vec<SummaryEntry>,
    pub full_text: Vec<FullTextEntry>,
}

/// The alignment output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentDoc {
    pub chapters: Vec<ChapterDoc>,
    pub stats: CorpusStats,
    pub config: AlignmentConfig,
    pub config_hash: String,
    pub fingerprint: String,
}

impl From<&SilverLabelSet> for ChapterDoc {
    fn from(s: &SilverLabelSet) -> Self {
        ChapterDoc {
            chapter_id: s.chapter_id.clone(),
            summary: s
                .summary
                .iter()
                .zip(&s.alignments)
                .enumerate()
                .map(|(i, (text, al))| SummaryEntry {
                    index: i,
                    text: text.clone(),
                    alignments: al
                        .iter()
                        .map(|a| AlignedText {
                            index: a.index,
                            text: s.full_text[a.index].clone(),
                            score: a.score,
                        })
                        .collect(),
                })
                .collect(),
            full_text: s
                .full_text
                .iter()
                .zip(&s.labels)
                .enumerate()
                .map(|(i, (text, l))| FullTextEntry {
                    index: i,
                    text: text.clone(),
                    salient: l.salient,
                    salience_score: l.salience_score,
                })
                .collect(),
        }
    }
}

impl ChapterDoc {
    pub fn into_label_set(self) -> Result<SilverLabelSet> {
        let n = self.full_text.len();
        for (pos, f) in self.full_text.iter().enumerate() {
            if f.index != pos {
                return Err(AlignmentError::Labels(format!(
                    "chapter {}: full_text index {} at position {pos}",
                    self.chapter_id, f.index
                )));
            }
        }
        let alignments: Vec<Vec<Alignment>> = self
            .summary
            .iter()
            .map(|s| {
                s.alignments
                    .iter()
                    .map(|a| {
                        if a.index >= n {
                            Err(AlignmentError::Labels(format!(
                                "chapter {}: alignment to sentence {} of {n}",
                                self.chapter_id, a.index
                            )))
                        } else {
                            Ok(Alignment {
                                index: a.index,
                                score: a.score,
                            })
                        }
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(SilverLabelSet {
            chapter_id: self.chapter_id,
            summary: self.summary.into_iter().map(|s| s.text).collect(),
            labels: self
                .full_text
                .iter()
                .map(|f| SentenceLabel {
                    salient: f.salient,
                    salience_score: f.salience_score,
                })
                .collect(),
            full_text: self.full_text.into_iter().map(|f| f.text).collect(),
            alignments,
        })
    }
}

/// Label sets keyed by chapter id.
pub fn label_index(doc: AlignmentDoc) -> Result<BTreeMap<String, SilverLabelSet>> {
    doc.chapters
        .into_iter()
        .map(|c| c.into_label_set().map(|s| (s.chapter_id.clone(), s)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_width_and_anchor() {
        let c = AlignmentConfig::default();
        assert_eq!(c.half_width(100), 10);
        assert_eq!(c.half_width(101), 11);
        assert_eq!(c.half_width(5), 1);
        assert_eq!(anchor(0, 4, 100), 0);
        assert_eq!(anchor(3, 4, 100), 75);
        assert_eq!(anchor(1, 1, 3), 2);
        assert_eq!(window(3, 4, 100, &c), (65, 85));
    }

    #[test]
    fn single_identical_match() {
        let sims = [0.0, 1.0, 0.0];
        let al = align_by(1, 3, &AlignmentConfig::default(), |_, j| sims[j]);
        assert_eq!(al, vec![vec![Alignment { index: 1, score: 1.0 }]]);
        let labels = labels_from_alignments(3, &al);
        assert!(labels[1].salient && labels[1].salience_score == 1.0);
        assert!(!labels[0].salient && labels[0].salience_score == 0.0);
    }

    #[test]
    fn threshold_gate() {
        let al = align_by(1, 5, &AlignmentConfig::default(), |_, _| 0.3);
        assert!(al[0].is_empty());
    }

    #[test]
    fn drop_filter_by_hand() {
        // Window covers all four sentences. max 0.80, so the floor is 0.75:
        // 0.80 and 0.77 pass, 0.74 and 0.73 fall below it.
        let sims = [0.74, 0.80, 0.73, 0.77];
        let cfg = AlignmentConfig {
            window_fraction: 1.0,
            ..AlignmentConfig::default()
        };
        let al = align_by(1, 4, &cfg, |_, j| sims[j]);
        let idx: Vec<usize> = al[0].iter().map(|a| a.index).collect();
        assert_eq!(idx, vec![1, 3]);
        // A value sitting exactly on the floor is kept.
        let sims = [0.75, 0.80, 0.79, 0.78, 0.76];
        let al = align_by(1, 5, &cfg, |_, j| sims[j]);
        let idx: Vec<usize> = al[0].iter().map(|a| a.index).collect();
        assert_eq!(idx, vec![1, 2, 3]);
    }

    #[test]
    fn paired_lines_accept_both_shapes() {
        let p = parse_paired_line(
            r#"{"chapter_id":"c1","summary_sentences":["x"],"full_text_sentences":[{"index":0,"text":"y"}]}"#,
            1,
        )
        .unwrap();
        assert_eq!(p.summary, Some(vec!["x".to_string()]));
        assert_eq!(p.full_text, vec!["y".to_string()]);
        let p = parse_paired_line(r#"{"chapter_id":"c2","full_text_sentences":["y"]}"#, 2).unwrap();
        assert_eq!(p.summary, None);
        assert!(parse_paired_line("{}", 3).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AlignmentConfig::default().validate().is_ok());
        for bad in [
            AlignmentConfig {
                window_fraction: 0.0,
                ..Default::default()
            },
            AlignmentConfig {
                min_similarity: 1.0,
                ..Default::default()
            },
            AlignmentConfig {
                max_drop: 1.0,
                ..Default::default()
            },
            AlignmentConfig {
                max_targets: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
