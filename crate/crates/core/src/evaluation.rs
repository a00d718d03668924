//! Ranking metrics for salience profiles against silver labels.
//!
//! Every ranking sorts by score descending and breaks ties by ascending
//! sentence index.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::SilverLabelSet;
use crate::salience::{MeasureId, SalienceProfile};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Tie-break rule recorded in report headers.
pub const TIE_BREAK: &str = "score-desc-then-index-asc";

/// Sentence indices by score descending, ties by ascending index.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(EvalError::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Mean of precision@rank over the ranks of positive sentences; 0 (with a
/// warning) when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        log::warn!("average precision with no positive labels");
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &i) in rank(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Fraction of positives among the top `k` sentences, `k` = positive count.
pub fn recall_at_k(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let k = labels.iter().filter(|&&l| l).count();
    if k == 0 {
        log::warn!("recall@k with no positive labels");
        return Ok(0.0);
    }
    let hits = rank(scores).into_iter().take(k).filter(|&i| labels[i]).count();
    Ok(hits as f64 / k as f64)
}

/// Length of the longest common subsequence, two rolling rows.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut prev = vec![0usize; short.len() + 1];
    let mut cur = vec![0usize; short.len() + 1];
    for x in long {
        for (j, y) in short.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

fn rouge_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// ROUGE-L F1 over tokens.
pub fn rouge_l_tokens<T: PartialEq>(selected: &[T], reference: &[T]) -> f64 {
    if selected.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(selected, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / selected.len() as f64;
    let r = lcs / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// ROUGE-L F1 over lowercased whitespace tokens.
pub fn rouge_l(selected: &str, reference: &str) -> f64 {
    rouge_l_tokens(&rouge_tokens(selected), &rouge_tokens(reference))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `None` when the chapter has no positive labels.
    pub map: Option<f64>,
    pub rouge_l: f64,
    pub recall_at_k: Option<f64>,
}

/// Metrics of one score vector against one label set. ROUGE-L compares the
/// top-k sentences with the salient ones, both joined in text order.
pub fn chapter_metrics(scores: &[f64], labels: &SilverLabelSet) -> Result<Metrics> {
    let flags = labels.salient_flags();
    check_lengths(scores, &flags)?;
    let k = labels.salient_count();
    let mut top: Vec<usize> = rank(scores).into_iter().take(k).collect();
    top.sort_unstable();
    let join =
        |idx: &mut dyn Iterator<Item = usize>| idx.map(|i| labels.full_text[i].as_str()).collect::<Vec<_>>().join(" ");
    let selected = join(&mut top.into_iter());
    let reference = join(&mut (0..flags.len()).filter(|&i| flags[i]));
    let rl = rouge_l(&selected, &reference);
    if k == 0 {
        return Ok(Metrics {
            map: None,
            rouge_l: rl,
            recall_at_k: None,
        });
    }
    Ok(Metrics {
        map: Some(average_precision(scores, &flags)?),
        rouge_l: rl,
        recall_at_k: Some(recall_at_k(scores, &flags)?),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub map: f64,
    pub rouge_l: f64,
    pub recall_at_k: f64,
    /// Chapters contributing to MAP and recall.
    pub ranked_chapters: usize,
    /// Chapters contributing to ROUGE-L.
    pub chapters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_chapter: BTreeMap<String, BTreeMap<MeasureId, Metrics>>,
    pub corpus_mean: BTreeMap<MeasureId, MeanMetrics>,
    /// Profiles without a matching label set.
    pub skipped: Vec<String>,
    pub config_hash: String,
    pub fingerprint: String,
}

/// Evaluates every profile against the label set with the same chapter id.
/// Chapters without positives count towards the ROUGE-L mean only.
pub fn evaluate(profiles: &[SalienceProfile], labels: &BTreeMap<String, SilverLabelSet>) -> Result<EvalReport> {
    let mut per_chapter: BTreeMap<String, BTreeMap<MeasureId, Metrics>> = BTreeMap::new();
    let mut skipped = Vec::new();
    for p in profiles {
        let Some(set) = labels.get(&p.chapter_id) else {
            log::warn!("no labels for chapter {}; skipped", p.chapter_id);
            skipped.push(p.chapter_id.clone());
            continue;
        };
        let mut row = BTreeMap::new();
        for (m, scores) in &p.scores {
            row.insert(*m, chapter_metrics(scores, set)?);
        }
        per_chapter.insert(p.chapter_id.clone(), row);
    }

    let mut sums: BTreeMap<MeasureId, (f64, f64, usize, f64, usize)> = BTreeMap::new();
    for row in per_chapter.values() {
        for (m, x) in row {
            let e = sums.entry(*m).or_default();
            if let (Some(map), Some(rec)) = (x.map, x.recall_at_k) {
                e.0 += map;
                e.1 += rec;
                e.2 += 1;
            }
            e.3 += x.rouge_l;
            e.4 += 1;
        }
    }
    let div = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    let corpus_mean = sums
        .into_iter()
        .map(|(m, (map, rec, ranked, rl, n))| {
            (
                m,
                MeanMetrics {
                    map: div(map, ranked),
                    rouge_l: div(rl, n),
                    recall_at_k: div(rec, ranked),
                    ranked_chapters: ranked,
                    chapters: n,
                },
            )
        })
        .collect();

    let mut fps: Vec<&str> = profiles.iter().map(|p| p.scorer_fingerprint.as_str()).collect();
    fps.sort_unstable();
    fps.dedup();
    let mut hashes: Vec<&str> = profiles.iter().map(|p| p.config_hash.as_str()).collect();
    hashes.sort_unstable();
    hashes.dedup();
    Ok(EvalReport {
        per_chapter,
        corpus_mean,
        skipped,
        config_hash: hashes.join("+"),
        fingerprint: fps.join("+"),
    })
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

fn header<W: Write>(w: &mut W, report: &EvalReport) -> Result<()> {
    writeln!(w, "# tie_break={TIE_BREAK}")?;
    writeln!(w, "# config_hash={}", report.config_hash)?;
    writeln!(w, "# fingerprint={}", report.fingerprint)?;
    Ok(())
}

/// One row per chapter and measure; MAP and recall are empty for chapters
/// without positives.
pub fn write_chapter_csv<W: Write>(report: &EvalReport, mut w: W) -> Result<()> {
    header(&mut w, report)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["chapter_id", "measure", "map", "rouge_l", "recall_at_k"])?;
    for (chapter, row) in &report.per_chapter {
        for (m, x) in row {
            csv.write_record([
                chapter.as_str(),
                m.name(),
                &x.map.map(fmt_metric).unwrap_or_default(),
                &fmt_metric(x.rouge_l),
                &x.recall_at_k.map(fmt_metric).unwrap_or_default(),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(report: &EvalReport, mut w: W) -> Result<()> {
    header(&mut w, report)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record([
        "measure",
        "map",
        "rouge_l",
        "recall_at_k",
        "ranked_chapters",
        "chapters",
    ])?;
    for (m, x) in &report.corpus_mean {
        csv.write_record([
            m.name(),
            &fmt_metric(x.map),
            &fmt_metric(x.rouge_l),
            &fmt_metric(x.recall_at_k),
            &x.ranked_chapters.to_string(),
            &x.chapters.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSentence {
    pub index: usize,
    pub text: String,
    pub scores: BTreeMap<MeasureId, f64>,
    pub silver: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub story_id: String,
    pub chapter_id: String,
    pub config_hash: String,
    pub fingerprint: String,
    pub sentences: Vec<PlotSentence>,
}

/// Per-sentence scores and silver labels of one chapter, for plotting.
pub fn plot_data(profile: &SalienceProfile, labels: &SilverLabelSet) -> Result<PlotData> {
    let n = labels.full_text.len();
    if let Some((m, v)) = profile.scores.iter().find(|(_, v)| v.len() != n) {
        return Err(EvalError::Shape(format!(
            "chapter {}: {m} has {} scores for {n} sentences",
            profile.chapter_id,
            v.len()
        )));
    }
    Ok(PlotData {
        story_id: profile.story_id.clone(),
        chapter_id: profile.chapter_id.clone(),
        config_hash: profile.config_hash.clone(),
        fingerprint: profile.scorer_fingerprint.clone(),
        sentences: (0..n)
            .map(|i| PlotSentence {
                index: i,
                text: labels.full_text[i].clone(),
                scores: profile.scores.iter().map(|(m, v)| (*m, v[i])).collect(),
                silver: labels.labels[i].salient,
            })
            .collect(),
    })
}
