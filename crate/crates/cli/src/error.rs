use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{flag}: {message}")]
    Usage { flag: String, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Resume(String),
    #[error(transparent)]
    Corpus(#[from] salience_core::corpus::CorpusError),
    #[error(transparent)]
    Retrieval(#[from] salience_core::retrieval::RetrievalError),
    #[error(transparent)]
    Scoring(#[from] salience_core::scoring::ScoringError),
    #[error(transparent)]
    Salience(#[from] salience_core::salience::SalienceError),
    #[error(transparent)]
    Alignment(#[from] salience_core::alignment::AlignmentError),
    #[error(transparent)]
    Eval(#[from] salience_core::evaluation::EvalError),
    #[error(transparent)]
    Embed(#[from] salience_core::embed::EmbedError),
}

impl CliError {
    pub fn usage(flag: &str, message: impl Into<String>) -> Self {
        CliError::Usage {
            flag: flag.to_string(),
            message: message.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage { .. } => "usage",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Input(_) => "input",
            CliError::Resume(_) => "resume",
            CliError::Corpus(_) => "corpus",
            CliError::Retrieval(_) => "retrieval",
            CliError::Scoring(_) => "scoring",
            CliError::Salience(_) => "salience",
            CliError::Alignment(_) => "alignment",
            CliError::Eval(_) => "evaluation",
            CliError::Embed(_) => "embedding",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage { .. } | CliError::Config(_) => 2,
            _ => 1,
        }
    }

    /// One JSON object on one line, for scripts.
    pub fn machine_line(&self) -> String {
        let mut obj = json!({ "error": self.kind(), "message": self.to_string() });
        if let CliError::Usage { flag, .. } = self {
            obj["flag"] = json!(flag);
        }
        obj.to_string()
    }
}
