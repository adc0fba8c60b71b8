use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("target token {token} at position {position} is outside vocabulary of size {vocab}")]
    TargetOutOfVocab {
        token: u32,
        position: usize,
        vocab: usize,
    },

    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid token sequence: {0}")]
    Sequence(String),

    #[error("adapter for role {0} is already attached")]
    DuplicateAdapter(&'static str),

    #[error("no adapter attached for role {0}")]
    UnknownAdapter(&'static str),

    #[error("sequence of length {len} exceeds context length {context_len}")]
    ContextOverflow { len: usize, context_len: usize },

    #[error("degenerate Binoculars denominator: |log XPPL| = {value:e} below {threshold:e}")]
    DegenerateDenominator { value: f64, threshold: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("non-finite loss at step {step}; diagnostics written to {dump:?}")]
    NanLoss { step: usize, dump: Option<PathBuf> },

    #[error("{skipped} of {seen} sequences skipped for degenerate scores (limit 5%)")]
    TooManySkipped { skipped: usize, seen: usize },

    #[error("need at least one sample of each label (human={human}, machine={machine})")]
    SingleClass { human: usize, machine: usize },

    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
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

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint or unsupported version (magic {magic:?}, version {version})")]
    Version { magic: Vec<u8>, version: u32 },

    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),

    #[error("checkpoint tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint stores {found}-bit floats but this build uses {expected}-bit")]
    Dtype { expected: u32, found: u32 },

    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
}
