#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use salience_core::corpus::{write_stories_jsonl, Story};
use salience_core::synthetic::{planted_corpus, planted_pairs, PlantedCorpus, PlantedSpec};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_salience"));
    c.env_remove("SALIENCE_SCORER_ENDPOINT");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

pub fn write_stories(path: &Path, stories: &[Story]) {
    let mut buf = Vec::new();
    write_stories_jsonl(stories, &mut buf).unwrap();
    std::fs::write(path, buf).unwrap();
}

pub fn write_pairs(path: &Path, corpus: &PlantedCorpus) {
    let mut text = String::new();
    for pair in planted_pairs(corpus) {
        let line = serde_json::json!({
            "chapter_id": pair.chapter_id,
            "summary_sentences": pair.summary,
            "full_text_sentences": pair.full_text,
        });
        text.push_str(&line.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

/// A small planted corpus on disk: stories, pairs and a background corpus
/// over the filler vocabulary.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub stories: PathBuf,
    pub pairs: PathBuf,
    pub background: PathBuf,
    pub corpus: PlantedCorpus,
}

pub fn planted_fixture(seed: u64, chapters: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let spec = PlantedSpec {
        chapters,
        chapters_per_story: 2,
        ..PlantedSpec::default()
    };
    let corpus = planted_corpus(seed, &spec);
    let stories = dir.path().join("stories.jsonl");
    let pairs = dir.path().join("pairs.jsonl");
    let background = dir.path().join("background.jsonl");
    write_stories(&stories, &corpus.stories);
    write_pairs(&pairs, &corpus);
    let bg = salience_core::synthetic::background_story(seed + 1, &corpus.filler, 2000);
    write_stories(&background, &[bg]);
    Fixture {
        dir,
        stories,
        pairs,
        background,
        corpus,
    }
}
