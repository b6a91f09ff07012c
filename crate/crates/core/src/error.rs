use thiserror::Error;

/// Errors surfaced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error(
        "input does not look like an auth log: {malformed} of the first {checked} lines are malformed"
    )]
    Format { malformed: usize, checked: usize },

    #[error("dimension mismatch in {op}: {left} vs {right}")]
    DimensionMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("index {index} out of range for vocabulary of size {vocabulary_size}")]
    IndexOutOfRange {
        index: usize,
        vocabulary_size: usize,
    },

    #[error("event {key} is not in the dictionary (dictionary/data mismatch)")]
    UnknownEvent { key: String },

    #[error("user {user} has {events} events; at least {needed} are needed to train")]
    TooFewEvents {
        user: String,
        events: usize,
        needed: usize,
    },

    #[error("batch is empty")]
    EmptyBatch,

    #[error("non-finite gradient encountered; training aborted (diverged)")]
    NonFiniteGradient,

    #[error("model/dictionary pairing violated: checksum {found} does not match {expected}")]
    ChecksumMismatch { expected: String, found: String },

    #[error("ROC undefined: need at least one positive and one negative label")]
    SingleClassRoc,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
