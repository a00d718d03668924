//! Seeded synthetic corpora with known structure, for experiments where
//! the expected outcome is fixed by construction.
//!
//! Words are pronounceable nonsense drawn without repetition, so separate
//! vocabularies (background text, story text, names, distractor passages)
//! never share a word.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::PairedChapter;
use crate::corpus::{Chapter, Story, WhitespaceTokenizer};

const ONSETS: &[&str] = &[
    "b", "br", "d", "dr", "f", "g", "gl", "h", "k", "kl", "l", "m", "n", "p", "pr", "r", "s", "st", "t", "tr", "v", "z",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "l", "m", "k"];

/// Draws fresh words; no word is ever returned twice.
pub struct WordSource {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl WordSource {
    pub fn new(seed: u64) -> Self {
        WordSource {
            rng: ChaCha8Rng::seed_from_u64(seed),
            used: HashSet::new(),
        }
    }

    pub fn word(&mut self) -> String {
        loop {
            let syllables = self.rng.random_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(&mut self.rng).expect("non-empty"));
                w.push_str(VOWELS.choose(&mut self.rng).expect("non-empty"));
                w.push_str(CODAS.choose(&mut self.rng).expect("non-empty"));
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    pub fn words(&mut self, n: usize) -> Vec<String> {
        (0..n).map(|_| self.word()).collect()
    }
}

fn capitalise(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// A sentence of `len` words drawn from `vocab`, capitalised and closed
/// with a full stop.
pub fn sentence_from(rng: &mut impl Rng, vocab: &[String], len: usize) -> String {
    let words: Vec<&str> = (0..len)
        .map(|_| vocab.choose(rng).expect("non-empty vocabulary").as_str())
        .collect();
    format!("{}.", capitalise(&words.join(" ")))
}

fn story_of(story_id: &str, chapters: Vec<Vec<String>>) -> Story {
    Story {
        story_id: story_id.to_string(),
        title: story_id.to_string(),
        chapters: chapters
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Chapter::from_texts(
                    format!("{story_id}-{i:03}"),
                    format!("Chapter {}", i + 1),
                    s,
                    &WhitespaceTokenizer,
                )
            })
            .collect(),
    }
}

/// Background text over `vocab` to train a reference scorer on.
pub fn background_story(seed: u64, vocab: &[String], sentences: usize) -> Story {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text: Vec<String> = (0..sentences)
        .map(|_| {
            let len = rng.random_range(6..=10);
            sentence_from(&mut rng, vocab, len)
        })
        .collect();
    story_of("background", vec![text])
}

/// Chapters of filler sentences with a few planted sentences. Each planted
/// sentence introduces a chapter-unique three-word name that the next few
/// sentences repeat, so removing the planted sentence (and only it) hides
/// the name from the context that precedes its repetitions.
pub struct PlantedCorpus {
    pub stories: Vec<Story>,
    /// Per chapter, in story order: whether each sentence is planted.
    pub planted: Vec<Vec<bool>>,
    /// The filler vocabulary, for training a background scorer.
    pub filler: Vec<String>,
}

pub struct PlantedSpec {
    pub chapters: usize,
    pub chapters_per_story: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub planted_per_chapter: usize,
    pub filler_vocab: usize,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            chapters: 50,
            chapters_per_story: 5,
            min_sentences: 24,
            max_sentences: 36,
            planted_per_chapter: 3,
            filler_vocab: 200,
        }
    }
}

pub fn planted_corpus(seed: u64, spec: &PlantedSpec) -> PlantedCorpus {
    let mut words = WordSource::new(seed ^ 0x5157_u64);
    let filler = words.words(spec.filler_vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chapters = Vec::new();
    let mut planted = Vec::new();
    for _ in 0..spec.chapters {
        let n = rng.random_range(spec.min_sentences..=spec.max_sentences);
        let mut flags = vec![false; n];
        let mut text: Vec<String> = (0..n)
            .map(|_| {
                let len = rng.random_range(6..=10);
                sentence_from(&mut rng, &filler, len)
            })
            .collect();
        // Slots are 5 apart; a planted sentence sits in the first two
        // places of its slot and its 3 repetitions fill the rest.
        let slots: Vec<usize> = (1..n.saturating_sub(4)).step_by(5).collect();
        let chosen: Vec<usize> = slots
            .choose_multiple(&mut rng, spec.planted_per_chapter.min(slots.len()))
            .copied()
            .collect();
        for slot in chosen {
            let p = if slot + 4 < n {
                slot + rng.random_range(0..2usize)
            } else {
                slot
            };
            let name = words.words(3).join(" ");
            let lead = sentence_from(&mut rng, &filler, 4);
            text[p] = format!("{} {}.", lead.trim_end_matches('.'), name);
            flags[p] = true;
            for r in 1..=3 {
                let tail = sentence_from(&mut rng, &filler, 3).to_lowercase();
                text[p + r] = format!("{} {}", capitalise(&name), tail);
            }
        }
        chapters.push(text);
        planted.push(flags);
    }
    let stories = chapters
        .chunks(spec.chapters_per_story.max(1))
        .enumerate()
        .map(|(i, chunk)| story_of(&format!("planted{i:03}"), chunk.to_vec()))
        .collect();
    PlantedCorpus {
        stories,
        planted,
        filler,
    }
}

/// Summary/full-text pairs in which each summary sentence is a verbatim
/// copy of one planted sentence, so alignment recovers the planted set.
pub fn planted_pairs(corpus: &PlantedCorpus) -> Vec<PairedChapter> {
    corpus
        .stories
        .iter()
        .flat_map(|s| &s.chapters)
        .zip(&corpus.planted)
        .map(|(ch, flags)| PairedChapter {
            chapter_id: ch.chapter_id.clone(),
            summary: Some(
                ch.sentences
                    .iter()
                    .zip(flags)
                    .filter(|(_, f)| **f)
                    .map(|(s, _)| s.text.clone())
                    .collect(),
            ),
            full_text: ch.sentences.iter().map(|s| s.text.clone()).collect(),
        })
        .collect()
}

/// A story built from a few episodes, each told `repeats` times in a row,
/// so most targets repeat text seen well before the current context.
pub struct RepeatedStory {
    pub story: Story,
    pub vocab: Vec<String>,
}

pub fn repeated_story(seed: u64, episodes: usize, sentences_per_episode: usize, repeats: usize) -> RepeatedStory {
    let mut words = WordSource::new(seed ^ 0x2e9e_u64);
    let vocab = words.words(300);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = Vec::new();
    for _ in 0..episodes {
        let episode: Vec<String> = (0..sentences_per_episode)
            .map(|_| {
                let len = rng.random_range(6..=10);
                sentence_from(&mut rng, &vocab, len)
            })
            .collect();
        for _ in 0..repeats {
            text.extend(episode.iter().cloned());
        }
    }
    RepeatedStory {
        story: story_of("repeated", vec![text]),
        vocab,
    }
}

/// `n` passages over a vocabulary of their own.
pub fn distractor_passages(seed: u64, n: usize) -> Vec<(String, String)> {
    let mut words = WordSource::new(seed ^ 0xd15c_u64);
    let vocab = words.words(400);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let text: Vec<String> = (0..rng.random_range(3..=6))
                .map(|_| {
                    let len = rng.random_range(6..=10);
                    sentence_from(&mut rng, &vocab, len)
                })
                .collect();
            (format!("kb{i:06}"), text.join(" "))
        })
        .collect()
}

/// A random chapter of `n` sentences over `vocab`.
pub fn random_chapter(rng: &mut impl Rng, chapter_id: &str, vocab: &[String], n: usize) -> Chapter {
    let text: Vec<String> = (0..n)
        .map(|_| {
            let len = rng.random_range(4..=12);
            sentence_from(rng, vocab, len)
        })
        .collect();
    Chapter::from_texts(chapter_id, chapter_id, &text, &WhitespaceTokenizer)
}
