use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("invalid mask: row {row} has no unmasked entry")]
    InvalidMask { row: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("unknown token {token:?} in {vocab} vocabulary")]
    UnknownToken { vocab: &'static str, token: String },

    #[error("token id {id} out of range for {vocab} vocabulary of size {size}")]
    TokenId {
        vocab: &'static str,
        id: usize,
        size: usize,
    },

    #[error("sequence of length {len} exceeds max_text_len {max}")]
    Length { len: usize, max: usize },

    #[error("sequence must be framed by [SOS] ... [EOS]")]
    Framing,

    #[error("unknown language {0:?}")]
    UnknownLanguage(String),

    #[error("language {0:?} is already registered")]
    AlreadyRegistered(String),

    #[error("selector matched no parameter: {0}")]
    EmptySelection(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("truncated checkpoint blob: expected {expected} bytes, found {found}")]
    CheckpointTruncated { expected: u64, found: u64 },

    #[error("checkpoint blob is corrupted: {0}")]
    CheckpointCorrupted(String),

    #[error("checkpoint manifest disagrees with blob: {0}")]
    CheckpointShape(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidMask { .. } => "invalid_mask",
            Error::Contract(_) => "contract",
            Error::DegenerateVector(_) => "degenerate_vector",
            Error::UnknownToken { .. } | Error::TokenId { .. } => "vocabulary",
            Error::Length { .. } => "length",
            Error::Framing => "framing",
            Error::UnknownLanguage(_) => "unknown_language",
            Error::AlreadyRegistered(_) => "already_registered",
            Error::EmptySelection(_) => "selector",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Schedule(_) => "schedule",
            Error::CheckpointVersion { .. } => "checkpoint_version",
            Error::CheckpointTruncated { .. } => "checkpoint_truncated",
            Error::CheckpointCorrupted(_) => "checkpoint_corrupted",
            Error::CheckpointShape(_) => "checkpoint_shape",
            Error::Parse { .. } => "parse",
            Error::Json(_) => "json",
            Error::Io { .. } => "io",
        }
    }
}
