mod common;

use common::{p, planted_fixture, run};

use salience_core::alignment::AlignmentDoc;
use salience_core::salience::read_profiles;

#[test]
fn full_pipeline_writes_every_artifact() {
    let fx = planted_fixture(3, 4);
    let out = fx.dir.path().join("out");
    let o = p(&out);

    let r = run(&["label", "--pairs", p(&fx.pairs), "--out", o]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let doc: AlignmentDoc = serde_json::from_slice(&std::fs::read(out.join("labels.json")).unwrap()).unwrap();
    assert_eq!(doc.chapters.len(), 4);

    let r = run(&[
        "salience",
        "--stories",
        p(&fx.stories),
        "--scorer-corpus",
        p(&fx.background),
        "--measures",
        "like-sal,random,descending",
        "--dump-retrieval",
        "--workers",
        "2",
        "--out",
        o,
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let profiles = read_profiles(
        std::fs::File::open(out.join("salience.jsonl"))
            .map(std::io::BufReader::new)
            .unwrap(),
    )
    .unwrap();
    assert_eq!(profiles.len(), 4);
    let ids: Vec<_> = profiles.iter().map(|p| p.chapter_id.clone()).collect();
    let expected: Vec<_> = fx
        .corpus
        .stories
        .iter()
        .flat_map(|s| &s.chapters)
        .map(|c| c.chapter_id.clone())
        .collect();
    assert_eq!(ids, expected, "output follows input order");
    assert!(out.join("retrieval.jsonl").exists());

    let r = run(&[
        "evaluate",
        "--salience",
        p(&out.join("salience.jsonl")),
        "--labels",
        p(&out.join("labels.json")),
        "--out",
        o,
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let summary = std::fs::read_to_string(out.join("eval_summary.csv")).unwrap();
    assert!(summary.starts_with("# tie_break="));
    assert!(summary.contains("Like-Sal"));

    let r = run(&[
        "plotdata",
        "--salience",
        p(&out.join("salience.jsonl")),
        "--labels",
        p(&out.join("labels.json")),
        "--out",
        o,
    ]);
    assert!(r.status.success());
    assert_eq!(std::fs::read_dir(out.join("plots")).unwrap().count(), 4);
}

#[test]
fn unknown_measure_is_a_usage_error_naming_the_flag() {
    let fx = planted_fixture(4, 2);
    let out = fx.dir.path().join("out");
    let r = run(&[
        "salience",
        "--stories",
        p(&fx.stories),
        "--measures",
        "like-sal,bogus",
        "--out",
        p(&out),
    ]);
    assert_eq!(r.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&r.stderr);
    let last = stderr.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(last).unwrap();
    assert_eq!(v["error"], "usage");
    assert_eq!(v["flag"], "--measures");
}

#[test]
fn missing_required_flag_exits_two() {
    let r = run(&["evaluate", "--salience", "x.jsonl"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn resume_refuses_foreign_config_without_force() {
    let fx = planted_fixture(5, 2);
    let out = fx.dir.path().join("out");
    let o = p(&out);
    let base = [
        "salience",
        "--stories",
        p(&fx.stories),
        "--measures",
        "random,ascending",
        "--out",
        o,
    ];
    assert!(run(&base).status.success());
    let first = std::fs::read_to_string(out.join("salience.jsonl")).unwrap();

    // Same config: everything is kept and the file is unchanged.
    let mut again = base.to_vec();
    again.push("--resume");
    assert!(run(&again).status.success());
    assert_eq!(std::fs::read_to_string(out.join("salience.jsonl")).unwrap(), first);

    let mut other = again.clone();
    other.extend(["--seed", "9"]);
    let r = run(&other);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("\"resume\""));

    other.push("--force");
    assert!(run(&other).status.success());
    assert_ne!(std::fs::read_to_string(out.join("salience.jsonl")).unwrap(), first);
}

#[test]
fn resume_completes_a_truncated_run() {
    let fx = planted_fixture(6, 4);
    let out = fx.dir.path().join("out");
    let o = p(&out);
    let base = [
        "salience",
        "--stories",
        p(&fx.stories),
        "--measures",
        "like-sal,random",
        "--out",
        o,
    ];
    assert!(run(&base).status.success());
    let full = std::fs::read_to_string(out.join("salience.jsonl")).unwrap();
    // Keep only the first story's chapters plus one chapter of the second.
    let partial: Vec<&str> = full.lines().take(3).collect();
    std::fs::write(out.join("salience.jsonl"), partial.join("\n") + "\n").unwrap();
    let mut resume = base.to_vec();
    resume.push("--resume");
    assert!(run(&resume).status.success());
    assert_eq!(std::fs::read_to_string(out.join("salience.jsonl")).unwrap(), full);
}

#[test]
fn config_file_and_flags_compose() {
    let fx = planted_fixture(7, 2);
    let out = fx.dir.path().join("out");
    let cfg = fx.dir.path().join("run.toml");
    std::fs::write(&cfg, "measures = \"random\"\nseed = 4\n").unwrap();
    let r = run(&[
        "salience",
        "--config",
        p(&cfg),
        "--stories",
        p(&fx.stories),
        "--out",
        p(&out),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(out.join("salience.jsonl")).unwrap();
    assert!(text.contains("\"Random\""));
    assert!(!text.contains("Like-Sal"));

    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let r = run(&[
        "salience",
        "--config",
        p(&cfg),
        "--stories",
        p(&fx.stories),
        "--out",
        p(&out),
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn memory_retrieval_lowers_perplexity_on_repeated_text() {
    use salience_core::synthetic::{background_story, repeated_story};
    let dir = tempfile::tempdir().unwrap();
    let rep = repeated_story(1, 3, 6, 3);
    let stories = dir.path().join("stories.jsonl");
    common::write_stories(&stories, &[rep.story]);
    let mut words = salience_core::synthetic::WordSource::new(99);
    let bg_vocab = words.words(200);
    let bg = dir.path().join("bg.jsonl");
    common::write_stories(&bg, &[background_story(2, &bg_vocab, 1500)]);
    let out = dir.path().join("out");
    let mut medians = Vec::new();
    for mode in ["mem", "off"] {
        let r = run(&[
            "perplexity",
            "--stories",
            p(&stories),
            "--scorer-corpus",
            p(&bg),
            "--mode",
            mode,
            "--context-sentences",
            "3",
            "--target-tokens",
            "40",
            "--out",
            p(&out),
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        let doc: serde_json::Value =
            serde_json::from_slice(&std::fs::read(out.join(format!("perplexity-{mode}.json"))).unwrap()).unwrap();
        medians.push(doc["median"].as_f64().unwrap());
    }
    assert!(medians[0] < medians[1], "mem {} vs off {}", medians[0], medians[1]);
}

#[test]
fn ingest_and_build_kb_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("tale.txt");
    std::fs::write(
        &raw,
        "CHAPTER 1\nThe fox ran. It was quick.\nCHAPTER 2\nThe dog slept. It dreamed of cats.\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let r = run(&[
        "ingest",
        "--input",
        p(&raw),
        "--chapter-regex",
        "^CHAPTER \\d+$",
        "--out",
        p(&out),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(out.join("stories.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.contains("\"story_id\":\"tale\""));

    let docs = dir.path().join("docs.jsonl");
    std::fs::write(&docs, "{\"passage_id\":\"a\",\"text\":\"One. Two three. Four five six.\"}\n{\"passage_id\":\"b\",\"text\":\"Short.\"}\n").unwrap();
    let kb = dir.path().join("kb");
    let r = run(&[
        "build-kb",
        "--input",
        p(&docs),
        "--passage-tokens",
        "3",
        "--dim",
        "32",
        "--out",
        p(&kb),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(kb.join("kb_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["dim"], 32);
    assert_eq!(meta["documents"], 2);
    let loaded = salience_core::KnowledgeBase::load(&kb).unwrap();
    assert_eq!(loaded.len(), meta["passages"].as_u64().unwrap() as usize);

    // A KB of the wrong dimension is refused up front.
    let r = run(&[
        "perplexity",
        "--stories",
        p(&out.join("stories.jsonl")),
        "--kb",
        p(&kb),
        "--out",
        p(&out),
    ]);
    assert_eq!(r.status.code(), Some(2));
}
