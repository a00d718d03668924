//! One function per subcommand.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use salience_core::alignment::{label_corpus, label_index, read_paired, AlignmentDoc, ChapterDoc};
use salience_core::corpus::{
    ingest as ingest_text, ingest_with_regex, make_blocks_at, read_stories_jsonl, write_stories_jsonl, RuleSplitter,
    Story, WhitespaceTokenizer,
};
use salience_core::embed::{Embedder, HashedBowEmbedder};
use salience_core::evaluation::{evaluate as evaluate_profiles, plot_data, write_chapter_csv, write_summary_csv};
use salience_core::retrieval::{chunk_document, KnowledgeBase, MemoryCache, RetrievalDump, StoryRetriever};
use salience_core::salience::{profile_story, read_profiles, ProfileSettings, SalienceProfile};
use salience_core::scoring::{median, perplexity as story_perplexity, Endpoint, NgramScorer, RemoteScorer, Scorer};
use salience_core::sentiment::LexiconSentiment;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{BuildKbArgs, EvalArgs, IngestArgs, LabelArgs, PerplexityArgs, SalienceArgs};

pub const STORIES_FILE: &str = "stories.jsonl";
pub const KB_META_FILE: &str = "kb_meta.json";
pub const LABELS_FILE: &str = "labels.json";
pub const SALIENCE_FILE: &str = "salience.jsonl";
pub const RETRIEVAL_FILE: &str = "retrieval.jsonl";
pub const EVAL_CHAPTERS_FILE: &str = "eval_chapters.csv";
pub const EVAL_SUMMARY_FILE: &str = "eval_summary.csv";
pub const PLOTS_DIR: &str = "plots";

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

/// Writes `contents` to a sibling temp file, then renames it into place.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn load_stories(path: &Path) -> Result<Vec<Story>, CliError> {
    let stories = read_stories_jsonl(open(path)?, &WhitespaceTokenizer)?;
    if stories.is_empty() {
        return Err(CliError::Input(format!("{}: no chapters", path.display())));
    }
    Ok(stories)
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

pub fn ingest(args: &IngestArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let splitter = RuleSplitter::new();
    let breaks: Option<Vec<usize>> = match &args.breaks {
        Some(list) => Some(
            list.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::usage("--breaks", format!("not a byte offset list: {e}")))?,
        ),
        None => None,
    };
    let raw_inputs = args.input.iter().filter(|p| !is_jsonl(p)).count();
    if args.story_id.is_some() && raw_inputs != 1 {
        return Err(CliError::usage("--story-id", "needs exactly one raw text input"));
    }
    if args.chapter_regex.is_some() && breaks.is_some() {
        return Err(CliError::usage("--breaks", "cannot be combined with --chapter-regex"));
    }
    let mut stories: Vec<Story> = Vec::new();
    for path in &args.input {
        if is_jsonl(path) {
            stories.extend(read_stories_jsonl(open(path)?, &WhitespaceTokenizer)?);
            continue;
        }
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let story_id = match &args.story_id {
            Some(id) => id.clone(),
            None => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| CliError::Input(format!("{}: no file name", path.display())))?,
        };
        let story = match &args.chapter_regex {
            Some(re) => ingest_with_regex(&text, &story_id, re, &splitter, &WhitespaceTokenizer)?,
            None => ingest_text(&text, &story_id, breaks.as_deref(), &splitter, &WhitespaceTokenizer)?,
        };
        stories.push(story);
    }
    let mut ids = BTreeSet::new();
    for s in &stories {
        if !ids.insert(s.story_id.as_str()) {
            return Err(CliError::Input(format!("story id `{}` appears twice", s.story_id)));
        }
    }
    let mut buf = Vec::new();
    write_stories_jsonl(&stories, &mut buf)?;
    let path = cfg.out.join(STORIES_FILE);
    write_atomic(&path, &buf)?;
    let chapters: usize = stories.iter().map(|s| s.chapters.len()).sum();
    log::info!(
        "wrote {} stories, {chapters} chapters to {}",
        stories.len(),
        path.display()
    );
    Ok(())
}

fn is_jsonl(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("jsonl") | Some("json"))
}

/// The reference scorer trains on `scorer_corpus` when given, otherwise on
/// `fallback_corpus`. Anything other than `reference` is a sidecar endpoint.
pub fn build_scorer(cfg: &RunConfig, fallback_corpus: &[Story]) -> Result<Box<dyn Scorer>, CliError> {
    if cfg.scorer == "reference" {
        let owned;
        let corpus = match &cfg.scorer_corpus {
            Some(path) => {
                owned = load_stories(path)?;
                &owned[..]
            }
            None => fallback_corpus,
        };
        return Ok(Box::new(NgramScorer::train(corpus, cfg.ngram())?));
    }
    let endpoint: Endpoint = cfg.scorer.parse().map_err(|e| CliError::usage("--scorer", e))?;
    Ok(Box::new(
        RemoteScorer::new(endpoint, Duration::from_millis(cfg.scorer_timeout_ms), cfg.embed_dim)
            .with_max_retries(cfg.scorer_retries),
    ))
}

/// Embedder for commands that never score: hashed bag-of-words locally, the
/// sidecar otherwise. Returns the embedder and its fingerprint.
fn build_embedder(cfg: &RunConfig) -> Result<(Box<dyn Embedder>, String), CliError> {
    if cfg.scorer == "reference" {
        return Ok((
            Box::new(HashedBowEmbedder::new(cfg.embed_dim)),
            format!("hashed-bow:dim={}", cfg.embed_dim),
        ));
    }
    let endpoint: Endpoint = cfg.scorer.parse().map_err(|e| CliError::usage("--scorer", e))?;
    let remote = RemoteScorer::new(endpoint, Duration::from_millis(cfg.scorer_timeout_ms), cfg.embed_dim)
        .with_max_retries(cfg.scorer_retries);
    let fp = remote.fingerprint();
    Ok((Box::new(remote), fp))
}

#[derive(Debug, Deserialize)]
struct KbDocument {
    passage_id: String,
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct KbMeta {
    pub passages: usize,
    pub documents: usize,
    pub dim: usize,
    pub passage_tokens: usize,
    pub kb_fingerprint: String,
    pub config_hash: String,
    pub fingerprint: String,
}

pub fn build_kb(args: &BuildKbArgs, cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.passage_tokens == 0 {
        return Err(CliError::usage("--passage-tokens", "must be at least 1"));
    }
    let splitter = RuleSplitter::new();
    let mut passages = Vec::new();
    let mut documents = 0;
    for (i, line) in open(&args.input)?.lines().enumerate() {
        let line = line.map_err(|e| CliError::io(&args.input, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: KbDocument = serde_json::from_str(&line)
            .map_err(|e| CliError::Input(format!("{} line {}: {e}", args.input.display(), i + 1)))?;
        documents += 1;
        let chunks = chunk_document(&doc.text, cfg.passage_tokens, &splitter, &WhitespaceTokenizer);
        if chunks.len() == 1 {
            passages.push((doc.passage_id, chunks.into_iter().next().expect("one chunk")));
        } else {
            for (j, c) in chunks.into_iter().enumerate() {
                passages.push((format!("{}#{j}", doc.passage_id), c));
            }
        }
    }
    let (embedder, fingerprint) = build_embedder(cfg)?;
    let kb = KnowledgeBase::build(passages, embedder.as_ref())?;
    kb.save(&cfg.out)?;
    let meta = KbMeta {
        passages: kb.len(),
        documents,
        dim: kb.dim(),
        passage_tokens: cfg.passage_tokens,
        kb_fingerprint: kb.fingerprint(),
        config_hash: cfg.config_hash(),
        fingerprint,
    };
    write_json(&cfg.out.join(KB_META_FILE), &meta)?;
    log::info!("indexed {} passages from {documents} documents", kb.len());
    Ok(())
}

pub fn label(args: &LabelArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let align = cfg.alignment()?;
    let pairs = read_paired(open(&args.pairs)?)?;
    let (embedder, fingerprint) = build_embedder(cfg)?;
    let (sets, stats) = label_corpus(&pairs, embedder.as_ref(), &align)?;
    let doc = AlignmentDoc {
        chapters: sets.iter().map(ChapterDoc::from).collect(),
        stats,
        config: align,
        config_hash: cfg.config_hash(),
        fingerprint,
    };
    write_json(&cfg.out.join(LABELS_FILE), &doc)?;
    log::info!(
        "labelled {} chapters ({} salient sentences, {} skipped)",
        doc.stats.chapters,
        doc.stats.labels,
        doc.stats.skipped.len()
    );
    Ok(())
}

fn load_kb(cfg: &RunConfig, dim: usize) -> Result<KnowledgeBase, CliError> {
    match &cfg.kb {
        Some(dir) => {
            let kb = KnowledgeBase::load(dir)?;
            if kb.dim() != dim {
                return Err(CliError::Config(format!(
                    "knowledgebase {} has dimension {}, scorer embeds at {dim}",
                    dir.display(),
                    kb.dim()
                )));
            }
            Ok(kb)
        }
        None => Ok(KnowledgeBase::empty(dim)),
    }
}

/// One line of the retrieval dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalLine {
    pub story_id: String,
    pub chapter_id: String,
    pub config_hash: String,
    #[serde(flatten)]
    pub dump: RetrievalDump,
}

struct StoryResult {
    profiles: Vec<SalienceProfile>,
    retrieval: Vec<RetrievalLine>,
}

fn read_lines_if_exists<T, F>(path: &Path, parse: F) -> Result<Vec<T>, CliError>
where
    F: Fn(&str, usize) -> Result<T, CliError>,
{
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(parse(&line, i + 1)?);
        }
    }
    Ok(out)
}

/// Stories whose every chapter already has a profile under `hash`. Partly
/// done stories are recomputed from the start, since memory depends on
/// every earlier block.
fn resume_state(
    stories: &[Story],
    out: &Path,
    hash: &str,
    force: bool,
) -> Result<HashMap<String, StoryResult>, CliError> {
    let path = out.join(SALIENCE_FILE);
    if !path.exists() {
        return Ok(HashMap::new());
    }
    let profiles = read_profiles(open(&path)?)?;
    let foreign: BTreeSet<&str> = profiles
        .iter()
        .filter(|p| p.config_hash != hash)
        .map(|p| p.config_hash.as_str())
        .collect();
    if !foreign.is_empty() && !force {
        return Err(CliError::Resume(format!(
            "{} holds records from config {} but this run is {hash}; rerun with --force to discard them",
            path.display(),
            foreign.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let dumps: Vec<RetrievalLine> = read_lines_if_exists(&out.join(RETRIEVAL_FILE), |line, n| {
        serde_json::from_str(line).map_err(|e| CliError::Input(format!("{RETRIEVAL_FILE} line {n}: {e}")))
    })?;
    let mut by_chapter: HashMap<(String, String), SalienceProfile> = HashMap::new();
    for p in profiles.into_iter().filter(|p| p.config_hash == hash) {
        by_chapter.insert((p.story_id.clone(), p.chapter_id.clone()), p);
    }
    let mut done = HashMap::new();
    for story in stories {
        let found: Option<Vec<SalienceProfile>> = story
            .chapters
            .iter()
            .map(|c| by_chapter.remove(&(story.story_id.clone(), c.chapter_id.clone())))
            .collect();
        if let Some(profiles) = found {
            let retrieval = dumps
                .iter()
                .filter(|d| d.story_id == story.story_id && d.config_hash == hash)
                .cloned()
                .collect();
            done.insert(story.story_id.clone(), StoryResult { profiles, retrieval });
        }
    }
    Ok(done)
}

fn append_story(out: &Path, result: &StoryResult, dump: bool) -> Result<(), CliError> {
    let path = out.join(SALIENCE_FILE);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| CliError::io(&path, e))?;
    let mut buf = String::new();
    for p in &result.profiles {
        buf.push_str(&p.to_json_line());
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| CliError::io(&path, e))?;
    if dump {
        let path = out.join(RETRIEVAL_FILE);
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CliError::io(&path, e))?;
        let mut buf = String::new();
        for r in &result.retrieval {
            buf.push_str(&serde_json::to_string(r).expect("serialisable"));
            buf.push('\n');
        }
        f.write_all(buf.as_bytes()).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}

pub fn salience(args: &SalienceArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let measures = cfg.measure_set()?;
    let retrieval = cfg.retrieval()?;
    let window = cfg.window()?;
    let cluster = cfg.cluster()?;
    let eviction = cfg.eviction()?;
    if args.force && !args.resume {
        return Err(CliError::usage("--force", "only meaningful with --resume"));
    }
    let stories = load_stories(&args.scorer.stories)?;
    let mut chapter_ids = BTreeSet::new();
    for c in stories.iter().flat_map(|s| &s.chapters) {
        if !chapter_ids.insert(c.chapter_id.as_str()) {
            return Err(CliError::Input(format!(
                "chapter id `{}` is used by two stories",
                c.chapter_id
            )));
        }
    }
    let scorer = build_scorer(cfg, &stories)?;
    let kb = load_kb(cfg, scorer.embedder().dim())?;
    let hash = cfg.config_hash();
    let sentiment = LexiconSentiment::builtin();
    let settings = ProfileSettings {
        measures,
        window,
        cluster,
        seed: cfg.seed,
        config_hash: hash.clone(),
        tokenizer: &WhitespaceTokenizer,
        sentiment: &sentiment,
    };

    let mut done = if args.resume {
        resume_state(&stories, &cfg.out, &hash, args.force)?
    } else {
        HashMap::new()
    };
    // Start the working files from the finished stories only.
    let salience_path = cfg.out.join(SALIENCE_FILE);
    let retrieval_path = cfg.out.join(RETRIEVAL_FILE);
    for path in [&salience_path, &retrieval_path] {
        if path.exists() {
            fs::remove_file(path).map_err(|e| CliError::io(path, e))?;
        }
    }
    for story in &stories {
        if let Some(r) = done.get(&story.story_id) {
            append_story(&cfg.out, r, args.dump_retrieval)?;
        }
    }
    if !done.is_empty() {
        log::info!("resuming: {} of {} stories already done", done.len(), stories.len());
    }

    let pending: Vec<&Story> = stories.iter().filter(|s| !done.contains_key(&s.story_id)).collect();
    let write_lock = Mutex::new(());
    let pool = thread_pool(cfg.workers)?;
    let results: Vec<Result<(String, StoryResult), CliError>> = pool.install(|| {
        pending
            .par_iter()
            .map(|story| {
                let outputs = profile_story(
                    story,
                    &kb,
                    MemoryCache::new(cfg.memory_capacity, eviction),
                    scorer.as_ref(),
                    retrieval,
                    &settings,
                )?;
                let mut result = StoryResult {
                    profiles: Vec::with_capacity(outputs.len()),
                    retrieval: Vec::new(),
                };
                for o in outputs {
                    for dump in o.retrieval {
                        result.retrieval.push(RetrievalLine {
                            story_id: story.story_id.clone(),
                            chapter_id: o.profile.chapter_id.clone(),
                            config_hash: hash.clone(),
                            dump,
                        });
                    }
                    result.profiles.push(o.profile);
                }
                {
                    let _guard = write_lock.lock().expect("write lock");
                    append_story(&cfg.out, &result, args.dump_retrieval)?;
                }
                log::info!("story {} done", story.story_id);
                Ok((story.story_id.clone(), result))
            })
            .collect()
    });
    for r in results {
        let (id, result) = r?;
        done.insert(id, result);
    }

    // Rewrite in input order so the artifact does not depend on scheduling.
    let mut salience_buf = String::new();
    let mut retrieval_buf = String::new();
    for story in &stories {
        let r = &done[&story.story_id];
        for p in &r.profiles {
            salience_buf.push_str(&p.to_json_line());
            salience_buf.push('\n');
        }
        for d in &r.retrieval {
            retrieval_buf.push_str(&serde_json::to_string(d).expect("serialisable"));
            retrieval_buf.push('\n');
        }
    }
    write_atomic(&salience_path, salience_buf.as_bytes())?;
    if args.dump_retrieval {
        write_atomic(&retrieval_path, retrieval_buf.as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryBlockPerplexity {
    pub story_id: String,
    pub block_id: u64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityDoc {
    pub mode: String,
    pub median: f64,
    pub blocks: Vec<StoryBlockPerplexity>,
    pub config_hash: String,
    pub fingerprint: String,
}

pub fn perplexity_path(out: &Path, mode: &str) -> PathBuf {
    out.join(format!("perplexity-{mode}.json"))
}

pub fn perplexity(args: &PerplexityArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let retrieval = cfg.retrieval()?;
    let window = cfg.window()?;
    let eviction = cfg.eviction()?;
    let stories = load_stories(&args.scorer.stories)?;
    let scorer = build_scorer(cfg, &stories)?;
    let kb = load_kb(cfg, scorer.embedder().dim())?;
    let pool = thread_pool(cfg.workers)?;
    let per_story: Vec<Result<Vec<StoryBlockPerplexity>, CliError>> = pool.install(|| {
        stories
            .par_iter()
            .map(|story| {
                let blocks: Vec<_> = story
                    .chapters
                    .iter()
                    .enumerate()
                    .flat_map(|(i, c)| make_blocks_at(c, &window, &WhitespaceTokenizer, story.sentence_offset(i)))
                    .collect();
                if blocks.is_empty() {
                    return Ok(Vec::new());
                }
                let mut retriever = StoryRetriever::new(
                    story.story_id.clone(),
                    &kb,
                    MemoryCache::new(cfg.memory_capacity, eviction),
                    scorer.embedder(),
                    retrieval,
                );
                let report = story_perplexity(&blocks, retrieval.mode, scorer.as_ref(), &mut retriever)?;
                Ok(report
                    .blocks
                    .into_iter()
                    .map(|b| StoryBlockPerplexity {
                        story_id: story.story_id.clone(),
                        block_id: b.block_id,
                        perplexity: b.perplexity,
                    })
                    .collect())
            })
            .collect()
    });
    let mut blocks = Vec::new();
    for r in per_story {
        blocks.extend(r?);
    }
    let values: Vec<f64> = blocks.iter().map(|b| b.perplexity).collect();
    let median = median(&values).ok_or_else(|| CliError::Input("no chapter has a scorable block".into()))?;
    let doc = PerplexityDoc {
        mode: retrieval.mode.as_str().to_string(),
        median,
        blocks,
        config_hash: cfg.config_hash(),
        fingerprint: scorer.fingerprint(),
    };
    write_json(&perplexity_path(&cfg.out, &doc.mode), &doc)?;
    println!("{} {median:.6}", doc.mode);
    Ok(())
}

fn load_eval_inputs(
    args: &EvalArgs,
) -> Result<
    (
        Vec<SalienceProfile>,
        BTreeMap<String, salience_core::alignment::SilverLabelSet>,
    ),
    CliError,
> {
    let profiles = read_profiles(open(&args.salience)?)?;
    let doc: AlignmentDoc = serde_json::from_reader(open(&args.labels)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.labels.display())))?;
    Ok((profiles, label_index(doc)?))
}

pub fn evaluate(args: &EvalArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let (profiles, labels) = load_eval_inputs(args)?;
    let report = evaluate_profiles(&profiles, &labels)?;
    for (path, summary) in [(EVAL_CHAPTERS_FILE, false), (EVAL_SUMMARY_FILE, true)] {
        let mut buf = Vec::new();
        if summary {
            write_summary_csv(&report, &mut buf)?;
        } else {
            write_chapter_csv(&report, &mut buf)?;
        }
        write_atomic(&cfg.out.join(path), &buf)?;
    }
    if !report.skipped.is_empty() {
        log::warn!("{} chapters had no labels", report.skipped.len());
    }
    let mut stdout = std::io::stdout().lock();
    for (m, mean) in &report.corpus_mean {
        let _ = writeln!(
            stdout,
            "{m}\tmap={:.4}\trouge_l={:.4}\trecall_at_k={:.4}",
            mean.map, mean.rouge_l, mean.recall_at_k
        );
    }
    Ok(())
}

pub fn plotdata(args: &EvalArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let (profiles, labels) = load_eval_inputs(args)?;
    let dir = cfg.out.join(PLOTS_DIR);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut written = 0;
    for p in &profiles {
        let Some(set) = labels.get(&p.chapter_id) else {
            log::warn!("chapter {} has no labels; no plot data", p.chapter_id);
            continue;
        };
        let data = plot_data(p, set)?;
        write_json(&dir.join(format!("{}.json", sanitize(&p.chapter_id))), &data)?;
        written += 1;
    }
    log::info!("wrote {written} plot files");
    Ok(())
}

/// Chapter ids as file names: anything but `[A-Za-z0-9._-]` becomes `_`.
pub fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sanitize_keeps_safe_chars() {
        assert_eq!(sanitize("story-1/ch 02.x"), "story-1_ch_02.x");
    }
}
