//! Stories, chapters, sentences and the sliding context/target blocks the
//! scorer consumes.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("story contains no sentences")]
    EmptyStory,
    #[error("chapter break at byte {0} is out of range or not on a char boundary")]
    InvalidBreak(usize),
    #[error("invalid chapter-regex: {0}")]
    Regex(#[from] regex::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {reason}")]
    InvalidRecord { line: usize, reason: String },
    #[error("window spec field `{0}` must be >= 1")]
    InvalidWindow(&'static str),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub index: usize,
    pub text: String,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chapter {
    pub chapter_id: String,
    pub title: String,
    pub sentences: Vec<Sentence>,
}

impl Chapter {
    /// Builds a chapter from raw sentence strings, normalising whitespace and
    /// dropping blank entries.
    pub fn from_texts<S: AsRef<str>>(
        chapter_id: impl Into<String>,
        title: impl Into<String>,
        texts: &[S],
        tokenizer: &dyn Tokenizer,
    ) -> Self {
        let sentences = texts
            .iter()
            .map(|t| normalize_whitespace(t.as_ref()))
            .filter(|t| !t.is_empty())
            .enumerate()
            .map(|(index, text)| Sentence {
                index,
                token_count: tokenizer.count_tokens(&text),
                text,
            })
            .collect();
        Chapter {
            chapter_id: chapter_id.into(),
            title: title.into(),
            sentences,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Story {
    pub story_id: String,
    pub title: String,
    pub chapters: Vec<Chapter>,
}

impl Story {
    /// Story-level time index of the first sentence of chapter `chapter_idx`.
    pub fn sentence_offset(&self, chapter_idx: usize) -> u64 {
        self.chapters[..chapter_idx]
            .iter()
            .map(|c| c.sentences.len() as u64)
            .sum()
    }
}

/// Word-piece counting abstraction.
pub trait Tokenizer: Send + Sync {
    fn count_tokens(&self, text: &str) -> usize;
    /// The first `n` tokens of `text`, rejoined.
    fn take_first(&self, text: &str, n: usize) -> String;
    /// The last `n` tokens of `text`, rejoined.
    fn take_last(&self, text: &str, n: usize) -> String;
}

/// Reference tokenizer: one token per whitespace-separated word.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn take_first(&self, text: &str, n: usize) -> String {
        text.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
    }

    fn take_last(&self, text: &str, n: usize) -> String {
        let words: Vec<&str> = text.split_whitespace().collect();
        words[words.len().saturating_sub(n)..].join(" ")
    }
}

/// Token count under the reference whitespace tokenizer.
pub fn count_tokens(text: &str) -> usize {
    WhitespaceTokenizer.count_tokens(text)
}

pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits running text into sentences.
pub trait SentenceSplitter: Send + Sync {
    fn split(&self, text: &str) -> Vec<String>;
}

const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "messrs", "dr", "st", "prof", "sr", "jr", "vs", "etc", "capt", "col", "gen", "lt", "mt", "rev",
    "sgt", "hon", "gov", "no", "vol", "ch", "fig", "esq", "ft",
];

/// Deterministic splitter: a sentence ends at a word carrying terminal
/// punctuation (`.`, `!`, `?`, optionally followed by closing quotes or
/// brackets) unless that word is a known abbreviation or an initial.
/// Blank lines always end a sentence.
#[derive(Debug, Clone, Default)]
pub struct RuleSplitter {
    extra_abbreviations: Vec<String>,
}

impl RuleSplitter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_abbreviations<I, S>(abbrevs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        RuleSplitter {
            extra_abbreviations: abbrevs.into_iter().map(|s| s.into().to_lowercase()).collect(),
        }
    }

    fn ends_sentence(&self, word: &str) -> bool {
        let trimmed = word.trim_end_matches(CLOSERS);
        let Some(last) = trimmed.chars().last() else {
            return false;
        };
        if !matches!(last, '.' | '!' | '?') {
            return false;
        }
        if last != '.' || trimmed.ends_with("..") {
            return true;
        }
        let stem = trimmed.trim_start_matches(OPENERS).trim_end_matches('.');
        if stem.is_empty() {
            return true;
        }
        let mut chars = stem.chars();
        let first = chars.next().unwrap_or(' ');
        // "A." style initials
        if first.is_alphabetic() && chars.next().is_none() {
            return false;
        }
        // "U.S." / "e.g." style dotted abbreviations
        if stem.contains('.') && stem.split('.').all(|p| p.chars().count() <= 2) {
            return false;
        }
        let lower = stem.to_lowercase();
        if ABBREVIATIONS.contains(&lower.as_str()) || self.extra_abbreviations.contains(&lower) {
            return false;
        }
        true
    }
}

const CLOSERS: &[char] = &['"', '\'', ')', ']', '\u{201d}', '\u{2019}', '\u{bb}'];
const OPENERS: &[char] = &['"', '\'', '(', '[', '\u{201c}', '\u{2018}', '\u{ab}'];

impl SentenceSplitter for RuleSplitter {
    fn split(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for paragraph in split_paragraphs(text) {
            let mut current: Vec<&str> = Vec::new();
            for word in paragraph.split_whitespace() {
                current.push(word);
                if self.ends_sentence(word) {
                    out.push(current.join(" "));
                    current.clear();
                }
            }
            if !current.is_empty() {
                out.push(current.join(" "));
            }
        }
        out
    }
}

fn split_paragraphs(text: &str) -> Vec<&str> {
    let mut paragraphs = Vec::new();
    let mut start = 0;
    let mut blank_run = false;
    let mut line_start = 0;
    for (i, c) in text.char_indices() {
        if c == '\n' {
            let line = &text[line_start..i];
            if line.trim().is_empty() {
                if !blank_run && line_start > start {
                    paragraphs.push(&text[start..line_start]);
                }
                blank_run = true;
                start = i + 1;
            } else {
                blank_run = false;
            }
            line_start = i + 1;
        }
    }
    if start < text.len() {
        paragraphs.push(&text[start..]);
    }
    paragraphs
}

/// Splits raw text into sentences and chapters.
///
/// `chapter_breaks` are byte offsets where new chapters begin. Chapters
/// that contain no sentences are dropped.
pub fn ingest(
    raw_text: &str,
    story_id: &str,
    chapter_breaks: Option<&[usize]>,
    splitter: &dyn SentenceSplitter,
    tokenizer: &dyn Tokenizer,
) -> Result<Story> {
    let mut bounds = vec![0usize];
    if let Some(breaks) = chapter_breaks {
        let mut sorted = breaks.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for b in sorted {
            if b > raw_text.len() || !raw_text.is_char_boundary(b) {
                return Err(CorpusError::InvalidBreak(b));
            }
            if b != 0 {
                bounds.push(b);
            }
        }
    }
    bounds.push(raw_text.len());
    let sections: Vec<(String, &str)> = bounds
        .windows(2)
        .map(|w| (String::new(), &raw_text[w[0]..w[1]]))
        .collect();
    build_story(story_id, &sections, splitter, tokenizer)
}

/// Splits raw text into chapters at every line matching `pattern`; the
/// matching line becomes the chapter title. Text before the first heading
/// forms an untitled chapter.
pub fn ingest_with_regex(
    raw_text: &str,
    story_id: &str,
    pattern: &str,
    splitter: &dyn SentenceSplitter,
    tokenizer: &dyn Tokenizer,
) -> Result<Story> {
    let re = Regex::new(&format!("(?m){pattern}"))?;
    let mut sections: Vec<(String, &str)> = Vec::new();
    let mut title = String::new();
    let mut cursor = 0;
    for m in re.find_iter(raw_text) {
        let line_start = raw_text[..m.start()].rfind('\n').map_or(0, |i| i + 1);
        let line_end = raw_text[m.end()..].find('\n').map_or(raw_text.len(), |i| m.end() + i);
        if line_start < cursor {
            continue;
        }
        sections.push((std::mem::take(&mut title), &raw_text[cursor..line_start]));
        title = normalize_whitespace(&raw_text[line_start..line_end]);
        cursor = line_end;
    }
    sections.push((title, &raw_text[cursor..]));
    build_story(story_id, &sections, splitter, tokenizer)
}

fn build_story(
    story_id: &str,
    sections: &[(String, &str)],
    splitter: &dyn SentenceSplitter,
    tokenizer: &dyn Tokenizer,
) -> Result<Story> {
    let mut chapters = Vec::new();
    for (title, body) in sections {
        let texts = splitter.split(body);
        let chapter = Chapter::from_texts(
            format!("{story_id}-{:03}", chapters.len()),
            title.clone(),
            &texts,
            tokenizer,
        );
        if !chapter.is_empty() {
            chapters.push(chapter);
        }
    }
    if chapters.is_empty() {
        return Err(CorpusError::EmptyStory);
    }
    Ok(Story {
        story_id: story_id.to_string(),
        title: story_id.to_string(),
        chapters,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub context_sentences: usize,
    pub context_token_budget: usize,
    pub target_token_budget: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            context_sentences: 12,
            context_token_budget: 512,
            target_token_budget: 128,
        }
    }
}

impl WindowSpec {
    pub fn new(context_sentences: usize, context_token_budget: usize, target_token_budget: usize) -> Result<Self> {
        let spec = WindowSpec {
            context_sentences,
            context_token_budget,
            target_token_budget,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_sentences == 0 {
            return Err(CorpusError::InvalidWindow("context_sentences"));
        }
        if self.context_token_budget == 0 {
            return Err(CorpusError::InvalidWindow("context_token_budget"));
        }
        if self.target_token_budget == 0 {
            return Err(CorpusError::InvalidWindow("target_token_budget"));
        }
        Ok(())
    }
}

/// One scoring unit: the context ending at sentence `position` and the text
/// that follows it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    /// Story-level time index.
    pub block_id: u64,
    /// Index of the last context sentence within its chapter.
    pub position: usize,
    pub context: Vec<Sentence>,
    pub target: Vec<Sentence>,
}

impl Block {
    pub fn context_text(&self) -> String {
        join_sentences(&self.context)
    }

    pub fn target_text(&self) -> String {
        join_sentences(&self.target)
    }

    pub fn target_tokens(&self) -> usize {
        self.target.iter().map(|s| s.token_count).sum()
    }
}

pub fn join_sentences(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&s.text);
    }
    out
}

/// Sliding blocks over a chapter with block ids counted from 0.
pub fn make_blocks(chapter: &Chapter, spec: &WindowSpec, tokenizer: &dyn Tokenizer) -> Vec<Block> {
    make_blocks_at(chapter, spec, tokenizer, 0)
}

/// Sliding blocks whose ids start at `first_block_id` (the story-level index
/// of the chapter's first sentence).
///
/// Context covers sentences `max(0, t - context_sentences + 1) ..= t`; when it
/// exceeds the token budget, tokens are dropped from the oldest sentence
/// first. The target starts at `t + 1` and is cut at the target budget.
pub fn make_blocks_at(
    chapter: &Chapter,
    spec: &WindowSpec,
    tokenizer: &dyn Tokenizer,
    first_block_id: u64,
) -> Vec<Block> {
    let n = chapter.sentences.len();
    let mut blocks = Vec::with_capacity(n.saturating_sub(1));
    for t in 0..n.saturating_sub(1) {
        let start = (t + 1).saturating_sub(spec.context_sentences);
        let context = fit_context(&chapter.sentences[start..=t], spec.context_token_budget, tokenizer);
        let target = fit_target(&chapter.sentences[t + 1..], spec.target_token_budget, tokenizer);
        if target.is_empty() {
            continue;
        }
        blocks.push(Block {
            block_id: first_block_id + t as u64,
            position: t,
            context,
            target,
        });
    }
    blocks
}

fn fit_context(window: &[Sentence], budget: usize, tokenizer: &dyn Tokenizer) -> Vec<Sentence> {
    let total: usize = window.iter().map(|s| s.token_count).sum();
    let mut excess = total.saturating_sub(budget);
    let mut out = Vec::with_capacity(window.len());
    for s in window {
        if excess == 0 {
            out.push(s.clone());
        } else if s.token_count <= excess {
            excess -= s.token_count;
        } else {
            let keep = s.token_count - excess;
            excess = 0;
            out.push(Sentence {
                index: s.index,
                text: tokenizer.take_last(&s.text, keep),
                token_count: keep,
            });
        }
    }
    out
}

fn fit_target(following: &[Sentence], budget: usize, tokenizer: &dyn Tokenizer) -> Vec<Sentence> {
    let mut remaining = budget;
    let mut out = Vec::new();
    for s in following {
        if remaining == 0 {
            break;
        }
        if s.token_count <= remaining {
            remaining -= s.token_count;
            out.push(s.clone());
        } else {
            out.push(Sentence {
                index: s.index,
                text: tokenizer.take_first(&s.text, remaining),
                token_count: remaining,
            });
            remaining = 0;
        }
    }
    out
}

/// Wire record for one chapter line of the story JSONL format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChapterRecord {
    pub story_id: String,
    pub chapter_id: String,
    #[serde(default)]
    pub title: String,
    pub sentences: Vec<SentenceRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub index: usize,
    pub text: String,
}

/// Parses and validates a single JSONL chapter line.
pub fn parse_chapter_line(line: &str, line_no: usize, tokenizer: &dyn Tokenizer) -> Result<(String, Chapter)> {
    let record: ChapterRecord =
        serde_json::from_str(line).map_err(|source| CorpusError::Json { line: line_no, source })?;
    let invalid = |reason: String| CorpusError::InvalidRecord { line: line_no, reason };
    if record.sentences.is_empty() {
        return Err(invalid(format!("chapter `{}` has no sentences", record.chapter_id)));
    }
    let mut sentences = Vec::with_capacity(record.sentences.len());
    for (expected, s) in record.sentences.into_iter().enumerate() {
        if s.index != expected {
            return Err(invalid(format!("sentence index {} where {expected} expected", s.index)));
        }
        if s.text.trim().is_empty() {
            return Err(invalid(format!("sentence {expected} is blank")));
        }
        sentences.push(Sentence {
            index: s.index,
            token_count: tokenizer.count_tokens(&s.text),
            text: s.text,
        });
    }
    Ok((
        record.story_id,
        Chapter {
            chapter_id: record.chapter_id,
            title: record.title,
            sentences,
        },
    ))
}

/// Reads stories from chapter-per-line JSONL. Chapters of one story keep
/// their file order; stories are returned in order of first appearance.
pub fn read_stories_jsonl<R: BufRead>(reader: R, tokenizer: &dyn Tokenizer) -> Result<Vec<Story>> {
    let mut stories: Vec<Story> = Vec::new();
    let mut seen: Vec<HashSet<String>> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (story_id, chapter) = parse_chapter_line(&line, i + 1, tokenizer)?;
        let slot = match stories.iter().position(|s| s.story_id == story_id) {
            Some(slot) => slot,
            None => {
                stories.push(Story {
                    title: story_id.clone(),
                    story_id,
                    chapters: Vec::new(),
                });
                seen.push(HashSet::new());
                stories.len() - 1
            }
        };
        if !seen[slot].insert(chapter.chapter_id.clone()) {
            return Err(CorpusError::InvalidRecord {
                line: i + 1,
                reason: format!("duplicate chapter id `{}`", chapter.chapter_id),
            });
        }
        stories[slot].chapters.push(chapter);
    }
    Ok(stories)
}

pub fn write_stories_jsonl<W: Write>(stories: &[Story], mut writer: W) -> Result<()> {
    for story in stories {
        for chapter in &story.chapters {
            let record = ChapterRecord {
                story_id: story.story_id.clone(),
                chapter_id: chapter.chapter_id.clone(),
                title: chapter.title.clone(),
                sentences: chapter
                    .sentences
                    .iter()
                    .map(|s| SentenceRecord {
                        index: s.index,
                        text: s.text.clone(),
                    })
                    .collect(),
            };
            let line = serde_json::to_string(&record).map_err(|source| CorpusError::Json { line: 0, source })?;
            writeln!(writer, "{line}")?;
        }
    }
    Ok(())
}
