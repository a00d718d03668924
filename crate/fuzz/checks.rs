//! Entry points shared by the fuzz targets and the stable seed-replay test.
//!
//! Each function feeds arbitrary bytes to one parser and asserts the
//! invariants that must hold for whatever it accepts. Errors are fine;
//! panics are bugs.

// Each target binary uses one of these.
#![allow(dead_code)]

use std::io::Cursor;

use salience_core::alignment::read_paired;
use salience_core::corpus::{ingest, ingest_with_regex, read_stories_jsonl, RuleSplitter, WhitespaceTokenizer};
use salience_core::retrieval::decode_matrix;
use salience_core::salience::read_profiles;
use salience_core::scoring::protocol::{parse_embed_response, parse_health_response, parse_score_response};

pub fn story_jsonl(data: &[u8]) {
    if let Ok(stories) = read_stories_jsonl(Cursor::new(data), &WhitespaceTokenizer) {
        for story in &stories {
            for chapter in &story.chapters {
                for (i, s) in chapter.sentences.iter().enumerate() {
                    assert_eq!(s.index, i);
                }
            }
        }
    }
}

pub fn paired_jsonl(data: &[u8]) {
    let _ = read_paired(Cursor::new(data));
}

/// The first byte picks the chapter mode; the rest is the text.
pub fn raw_text(data: &[u8]) {
    let Some((&mode, rest)) = data.split_first() else {
        return;
    };
    let Ok(text) = std::str::from_utf8(rest) else {
        return;
    };
    let splitter = RuleSplitter::new();
    let story = match mode % 3 {
        0 => ingest(text, "fuzz", None, &splitter, &WhitespaceTokenizer),
        1 => {
            let breaks: Vec<usize> = (0..text.len()).step_by(usize::from(mode).max(1)).collect();
            ingest(text, "fuzz", Some(&breaks), &splitter, &WhitespaceTokenizer)
        }
        _ => ingest_with_regex(text, "fuzz", r"^Chapter\b.*$", &splitter, &WhitespaceTokenizer),
    };
    if let Ok(story) = story {
        for chapter in &story.chapters {
            assert!(!chapter.sentences.is_empty());
            for s in &chapter.sentences {
                assert!(!s.text.trim().is_empty());
            }
        }
    }
}

pub fn kb_matrix(data: &[u8]) {
    if let Ok(m) = decode_matrix(data) {
        assert_eq!(m.values.len(), m.dim * m.count);
        assert!(m.values.iter().all(|v| v.is_finite()));
    }
}

pub fn wire_response(data: &[u8]) {
    let Ok(line) = std::str::from_utf8(data) else {
        return;
    };
    let _ = parse_score_response(line);
    let _ = parse_embed_response(line);
    let _ = parse_health_response(line);
}

pub fn salience_jsonl(data: &[u8]) {
    let _ = read_profiles(Cursor::new(data));
}

pub fn run_config(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = salience_cli::RunConfig::from_toml(text) {
        let _ = cfg.config_hash();
    }
}
