use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid record: {0}")]
    Record(String),

    #[error("association {query_id}->{entry_id} has non-positive strength {strength}")]
    NonPositiveStrength {
        query_id: String,
        entry_id: String,
        strength: f64,
    },

    #[error("malformed JSON at line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("serialization error: {0}")]
    Serialize(String),

    #[error("token id {0} is not in the vocabulary")]
    UnknownToken(u32),

    #[error("encoder error: {0}")]
    Encoder(String),

    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },

    #[error("score matrix error: {0}")]
    Scores(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("non-finite loss at step {step} (max |score| = {max_abs_score})")]
    NonFiniteLoss { step: u64, max_abs_score: f64 },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("index error: {0}")]
    Index(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
