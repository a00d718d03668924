//! `salience` command-line driver.
//!
//! Every command reads its inputs, writes fixed-name artifacts under
//! `--out`, and stamps them with the config hash and scorer fingerprint.
//! Failures print one JSON line on stderr and exit non-zero (2 for usage
//! and configuration problems, 1 otherwise).

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "salience",
    version,
    about = "Narrative event salience: label, score and evaluate"
)]
pub struct Cli {
    /// Flat TOML file with run configuration keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Stories processed in parallel.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split raw text or chapter JSONL into the story JSONL format.
    Ingest(IngestArgs),
    /// Embed passages and write a knowledgebase directory.
    BuildKb(BuildKbArgs),
    /// Align summaries to full text and write silver labels.
    Label(LabelArgs),
    /// Compute salience measures for every chapter.
    Salience(SalienceArgs),
    /// Median perplexity under one retrieval mode.
    Perplexity(PerplexityArgs),
    /// Score salience profiles against silver labels.
    Evaluate(EvalArgs),
    /// Per-chapter JSON with scores and labels for plotting.
    Plotdata(EvalArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Raw `.txt` files or chapter JSONL files.
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    /// Story id for a single raw input (defaults to the file stem).
    #[arg(long)]
    pub story_id: Option<String>,
    /// Regex matching chapter heading lines in raw text.
    #[arg(long)]
    pub chapter_regex: Option<String>,
    /// Comma-separated byte offsets where chapters start.
    #[arg(long)]
    pub breaks: Option<String>,
}

#[derive(Debug, Args)]
pub struct BuildKbArgs {
    /// JSONL of `{"passage_id", "text"}` documents.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Whitespace tokens per passage when chunking documents.
    #[arg(long)]
    pub passage_tokens: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// Paired JSONL of `{"chapter_id", "summary_sentences", "full_text_sentences"}`.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub max_targets: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScorerArgs {
    /// Story JSONL produced by `ingest`.
    #[arg(long)]
    pub stories: PathBuf,
    /// kb-mem, kb, mem, off or scrambled.
    #[arg(long)]
    pub mode: Option<String>,
    /// Passages retrieved per block.
    #[arg(long)]
    pub k: Option<usize>,
    /// Knowledgebase directory from `build-kb`.
    #[arg(long)]
    pub kb: Option<PathBuf>,
    /// `reference` or a sidecar endpoint.
    #[arg(long)]
    pub scorer: Option<String>,
    /// Training stories for the reference scorer.
    #[arg(long)]
    pub scorer_corpus: Option<PathBuf>,
    #[arg(long)]
    pub memory_policy: Option<String>,
    #[arg(long)]
    pub memory_capacity: Option<usize>,
    #[arg(long)]
    pub context_sentences: Option<usize>,
    #[arg(long)]
    pub context_tokens: Option<usize>,
    #[arg(long)]
    pub target_tokens: Option<usize>,
    #[arg(long)]
    pub ngram_order: Option<usize>,
    #[arg(long)]
    pub ngram_smoothing: Option<f64>,
    #[arg(long)]
    pub ngram_boost: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SalienceArgs {
    #[command(flatten)]
    pub scorer: ScorerArgs,
    /// Comma-separated measure names, or `all`.
    #[arg(long)]
    pub measures: Option<String>,
    /// `similarity` (default) or `distance`.
    #[arg(long)]
    pub clus_polarity: Option<String>,
    /// Keep chapters already written with the current config hash.
    #[arg(long)]
    pub resume: bool,
    /// With `--resume`, discard records written under another config.
    #[arg(long)]
    pub force: bool,
    /// Also write per-block retrieval records.
    #[arg(long)]
    pub dump_retrieval: bool,
}

#[derive(Debug, Args)]
pub struct PerplexityArgs {
    #[command(flatten)]
    pub scorer: ScorerArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Salience JSONL from `salience`.
    #[arg(long)]
    pub salience: PathBuf,
    /// Label JSON from `label`.
    #[arg(long)]
    pub labels: PathBuf,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl ScorerArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.mode, self.mode.clone());
        set(&mut cfg.k, self.k);
        if self.kb.is_some() {
            cfg.kb = self.kb.clone();
        }
        set(&mut cfg.scorer, self.scorer.clone());
        if self.scorer_corpus.is_some() {
            cfg.scorer_corpus = self.scorer_corpus.clone();
        }
        set(&mut cfg.memory_policy, self.memory_policy.clone());
        set(&mut cfg.memory_capacity, self.memory_capacity);
        set(&mut cfg.context_sentences, self.context_sentences);
        set(&mut cfg.context_token_budget, self.context_tokens);
        set(&mut cfg.target_token_budget, self.target_tokens);
        set(&mut cfg.ngram_order, self.ngram_order);
        set(&mut cfg.ngram_smoothing, self.ngram_smoothing);
        set(&mut cfg.ngram_boost, self.ngram_boost);
        set(&mut cfg.embed_dim, self.embed_dim);
    }
}

/// Builds the effective configuration: defaults, then the config file, then
/// flags, then the scorer endpoint environment variable.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.workers, cli.workers);
    set(&mut cfg.out, cli.out.clone());
    match &cli.command {
        Command::BuildKb(a) => {
            set(&mut cfg.embed_dim, a.dim);
            set(&mut cfg.passage_tokens, a.passage_tokens);
        }
        Command::Label(a) => {
            set(&mut cfg.rho, a.rho);
            set(&mut cfg.mu, a.mu);
            set(&mut cfg.theta, a.theta);
            set(&mut cfg.max_targets, a.max_targets);
            set(&mut cfg.embed_dim, a.embed_dim);
        }
        Command::Salience(a) => {
            a.scorer.apply(&mut cfg);
            set(&mut cfg.measures, a.measures.clone());
            set(&mut cfg.clus_polarity, a.clus_polarity.clone());
        }
        Command::Perplexity(a) => a.scorer.apply(&mut cfg),
        Command::Ingest(_) | Command::Evaluate(_) | Command::Plotdata(_) => {}
    }
    cfg.apply_env();
    if cfg.workers == 0 {
        return Err(CliError::usage("--workers", "must be at least 1"));
    }
    Ok(cfg)
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    match &cli.command {
        Command::Ingest(a) => commands::ingest(a, &cfg),
        Command::BuildKb(a) => commands::build_kb(a, &cfg),
        Command::Label(a) => commands::label(a, &cfg),
        Command::Salience(a) => commands::salience(a, &cfg),
        Command::Perplexity(a) => commands::perplexity(a, &cfg),
        Command::Evaluate(a) => commands::evaluate(a, &cfg),
        Command::Plotdata(a) => commands::plotdata(a, &cfg),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            if code == 0 {
                let _ = e.print();
                return 0;
            }
            eprint!("{}", e.render());
            let flag = e
                .get(clap::error::ContextKind::InvalidArg)
                .map(|v| v.to_string())
                .unwrap_or_default();
            let line = CliError::usage(&flag, e.kind().to_string()).machine_line();
            eprintln!("{line}");
            return 2;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.machine_line());
            e.exit_code()
        }
    }
}
