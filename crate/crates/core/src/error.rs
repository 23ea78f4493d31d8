use std::path::PathBuf;

/// Errors surfaced by the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid vocabulary: {0}")]
    Vocab(String),

    #[error("invalid task: {0}")]
    Task(String),

    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),

    #[error("all groups in a batch must share one size: expected {expected}, found {found}")]
    RaggedBatch { expected: usize, found: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid rollout: {0}")]
    Rollout(String),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("invalid configuration:\n{}", format_config_errors(.0))]
    Config(Vec<ConfigIssue>),

    #[error("non-finite value during training at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unknown metric `{name}`; valid metrics: {}", .valid.join(", "))]
    UnknownMetric { name: String, valid: Vec<String> },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One offending configuration key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub key: String,
    pub message: String,
}

impl ConfigIssue {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            message: message.into(),
        }
    }
}

fn format_config_errors(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  {}: {}", i.key, i.message))
        .collect::<Vec<_>>()
        .join("\n")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
