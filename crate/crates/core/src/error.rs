use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("empty attention row {row}")]
    EmptyAttentionRow { row: usize },
    #[error("empty loss: every position is masked")]
    EmptyLoss,
    #[error("target id {id} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { id: u32, vocab: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss is not a scalar (shape {0:?})")]
    NotScalar(Vec<usize>),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("tokenizer error: {0}")]
    Tokenizer(String),
    #[error("cannot encode byte 0x{byte:02x} at offset {offset}")]
    Unencodable { byte: u8, offset: usize },
    #[error("id {id} out of range for vocabulary of {vocab}")]
    UnknownId { id: u32, vocab: usize },
    #[error("{kind} sequence of {len} exceeds positional table of {max}")]
    PositionOverflow { kind: &'static str, len: usize, max: usize },
    #[error("invalid sample: {0}")]
    Sample(String),
    #[error("checkpoint magic mismatch")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("shape conflict for parameter {name}: expected {expected:?}, found {found:?}")]
    ShapeConflict { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("non-finite loss at step {step} (batch {batch})")]
    NanLoss { step: u64, batch: u64 },
    #[error("data error: {0}")]
    Data(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
