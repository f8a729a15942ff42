use std::path::PathBuf;

use crate::corpus::Label;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("corpus '{0}' has no instances")]
    EmptyCorpus(String),

    #[error("unrecognised label value '{value}' (row {row})")]
    UnmappedLabel { value: String, row: usize },

    #[error("duplicate instance id '{0}'")]
    DuplicateId(String),

    #[error("instance '{0}' has empty text")]
    EmptyText(String),

    #[error("column '{0}' not found in header")]
    MissingColumn(String),

    #[error("requested {requested} {class} instances but only {available} available")]
    InsufficientClass {
        class: Label,
        requested: usize,
        available: usize,
    },

    #[error("invalid template '{pattern}': {reason}")]
    InvalidTemplate { pattern: String, reason: String },

    #[error("invalid verbalizer: {0}")]
    InvalidVerbalizer(String),

    #[error("label word '{0}' does not map to a single vocabulary unit")]
    UnboundLabelWord(String),

    #[error("prompt must contain exactly one mask placeholder, found {0}")]
    MaskCount(usize),

    #[error("encoded prompt length {length} exceeds maximum {max}")]
    SequenceOverflow { length: usize, max: usize },

    #[error("demonstration has label {found}, expected {expected}")]
    DemonstrationClass { expected: Label, found: Label },

    #[error("no {0} demonstrations available after excluding the input")]
    EmptyDemonstrationPool(Label),

    #[error("missing embedding for instance '{0}'")]
    MissingEmbedding(String),

    #[error("cannot embed empty text")]
    EmptyEmbeddingInput,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("template generator produced no valid candidates")]
    NoCandidates,

    #[error("gateway unavailable: {0}")]
    GatewayUnavailable(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("instance ids are not aligned: {0}")]
    Misaligned(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
