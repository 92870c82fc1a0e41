use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("mention {mention_id}: gold entity {entity_id} not found in domain {domain}")]
    UnresolvedGold {
        mention_id: String,
        entity_id: String,
        domain: String,
    },
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty knowledge base for domain {0}")]
    EmptyKb(String),
    #[error("missing candidate set for mention {0}")]
    MissingCandidates(String),
    #[error("missing prediction for mention {0}")]
    MissingPrediction(String),
    #[error("sequence of length {len} exceeds limit {limit}")]
    TooLong { len: usize, limit: usize },
    #[error("fused input of length {len} exceeds max positions {limit}; lower k")]
    FusedTooLong { len: usize, limit: usize },
    #[error("width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("gold candidate index {index} out of range for {count} candidates")]
    GoldOutOfRange { index: usize, count: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
