//! Run configuration: defaults, a flat TOML file, then command-line flags.
//!
//! The config hash covers every field that can change an artifact. The
//! output directory and the worker count do not, so they are left out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use salience_core::alignment::AlignmentConfig;
use salience_core::baselines::{ClusterConfig, ClusterPolarity};
use salience_core::corpus::WindowSpec;
use salience_core::hashing::sha256_hex;
use salience_core::retrieval::{EvictionPolicy, RetrievalConfig, RetrievalMode, DEFAULT_MEMORY_CAPACITY};
use salience_core::salience::{parse_measures, MeasureId};
use salience_core::scoring::NgramConfig;

use crate::error::CliError;

pub const ENDPOINT_ENV: &str = "SALIENCE_SCORER_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Retrieval mode name (`kb-mem`, `kb`, `mem`, `off`, `scrambled`).
    pub mode: String,
    pub k: usize,
    pub context_sentences: usize,
    pub context_token_budget: usize,
    pub target_token_budget: usize,
    /// Comma-separated measure names, or `all`.
    pub measures: String,
    pub seed: u64,
    /// `reference`, or a sidecar endpoint (`tcp://host:port`, `stdio:<cmd>`).
    pub scorer: String,
    /// Training text for the reference scorer; the scored stories when unset.
    pub scorer_corpus: Option<PathBuf>,
    pub ngram_order: usize,
    pub ngram_smoothing: f64,
    pub ngram_boost: f64,
    pub embed_dim: usize,
    pub scorer_timeout_ms: u64,
    pub scorer_retries: u32,
    pub kb: Option<PathBuf>,
    pub memory_policy: String,
    pub memory_capacity: usize,
    pub sentences_per_cluster: usize,
    pub clus_polarity: String,
    pub rho: f64,
    pub mu: f64,
    pub theta: f64,
    pub max_targets: usize,
    pub passage_tokens: usize,
    #[serde(skip_serializing)]
    pub out: PathBuf,
    #[serde(skip_serializing)]
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let window = WindowSpec::default();
        let ngram = NgramConfig::default();
        let align = AlignmentConfig::default();
        RunConfig {
            mode: RetrievalMode::KbAndMem.as_str().to_string(),
            k: RetrievalConfig::default().k,
            context_sentences: window.context_sentences,
            context_token_budget: window.context_token_budget,
            target_token_budget: window.target_token_budget,
            measures: "all".to_string(),
            seed: 0,
            scorer: "reference".to_string(),
            scorer_corpus: None,
            ngram_order: ngram.order,
            ngram_smoothing: ngram.smoothing,
            ngram_boost: ngram.boost,
            embed_dim: ngram.dim,
            scorer_timeout_ms: 30_000,
            scorer_retries: 2,
            kb: None,
            memory_policy: "lru".to_string(),
            memory_capacity: DEFAULT_MEMORY_CAPACITY,
            sentences_per_cluster: ClusterConfig::default().sentences_per_cluster,
            clus_polarity: "similarity".to_string(),
            rho: align.window_fraction,
            mu: align.min_similarity,
            theta: align.max_drop,
            max_targets: align.max_targets,
            passage_tokens: 100,
            out: PathBuf::from("out"),
            workers: 1,
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with the keys present in a TOML file.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Applies the scorer endpoint environment override.
    pub fn apply_env(&mut self) {
        if let Ok(endpoint) = std::env::var(ENDPOINT_ENV) {
            if !endpoint.trim().is_empty() {
                self.scorer = endpoint.trim().to_string();
            }
        }
    }

    /// Hex digest of the canonical JSON form of the hashed fields.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        sha256_hex(canonical.as_bytes())[..16].to_string()
    }

    pub fn retrieval_mode(&self) -> Result<RetrievalMode, CliError> {
        self.mode.parse().map_err(|e| CliError::usage("--mode", e))
    }

    pub fn retrieval(&self) -> Result<RetrievalConfig, CliError> {
        if self.k == 0 {
            return Err(CliError::usage("--k", "k must be at least 1"));
        }
        Ok(RetrievalConfig {
            k: self.k,
            mode: self.retrieval_mode()?,
            seed: self.seed,
        })
    }

    pub fn window(&self) -> Result<WindowSpec, CliError> {
        WindowSpec::new(
            self.context_sentences,
            self.context_token_budget,
            self.target_token_budget,
        )
        .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn measure_set(&self) -> Result<std::collections::BTreeSet<MeasureId>, CliError> {
        let set = parse_measures(&self.measures).map_err(|e| CliError::usage("--measures", e.to_string()))?;
        if set.is_empty() {
            return Err(CliError::usage("--measures", "no measures selected"));
        }
        Ok(set)
    }

    pub fn eviction(&self) -> Result<EvictionPolicy, CliError> {
        self.memory_policy
            .parse()
            .map_err(|e| CliError::usage("--memory-policy", e))
    }

    pub fn cluster(&self) -> Result<ClusterConfig, CliError> {
        let polarity: ClusterPolarity = self
            .clus_polarity
            .parse()
            .map_err(|e| CliError::usage("--clus-polarity", e))?;
        if self.sentences_per_cluster == 0 {
            return Err(CliError::Config("sentences_per_cluster must be at least 1".into()));
        }
        Ok(ClusterConfig {
            sentences_per_cluster: self.sentences_per_cluster,
            seed: self.seed,
            polarity,
            ..ClusterConfig::default()
        })
    }

    pub fn alignment(&self) -> Result<AlignmentConfig, CliError> {
        let cfg = AlignmentConfig {
            window_fraction: self.rho,
            min_similarity: self.mu,
            max_drop: self.theta,
            max_targets: self.max_targets,
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn ngram(&self) -> NgramConfig {
        NgramConfig {
            order: self.ngram_order,
            smoothing: self.ngram_smoothing,
            boost: self.ngram_boost,
            dim: self.embed_dim,
        }
    }
}
