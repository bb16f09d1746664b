use std::path::PathBuf;

/// Errors produced anywhere in the watermarking pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("token id {id} is outside the vocabulary of size {size}")]
    OutOfVocab { id: u32, size: u32 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid value for `{field}`: {message}")]
    InvariantViolation { field: &'static str, message: String },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },

    #[error("backward called without a recorded forward pass")]
    NoForwardRecorded,

    #[error("window must contain exactly {expected} tokens, got {actual}")]
    WindowSizeMismatch { expected: usize, actual: usize },

    #[error("vocabulary of size {vocab} cannot supply {requested} distinct windows of length {window}")]
    DegenerateVocab { vocab: u32, window: usize, requested: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("sequence of length {len} is shorter than the window {window}")]
    SequenceTooShort { len: usize, window: usize },

    #[error("all candidate logits are -inf")]
    DegenerateLogits,

    #[error("could not construct a {class} sample after {attempts} attempts")]
    ConstructionFailure { class: &'static str, attempts: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("empty input")]
    EmptyInput,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("bad magic in weights file")]
    BadMagic,

    #[error("unsupported weights file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("architecture mismatch: file holds `{found}`, expected `{expected}`")]
    ArchitectureMismatch { found: String, expected: String },

    #[error("malformed weights file: {0}")]
    MalformedWeights(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invariant(field: &'static str, message: impl Into<String>) -> Self {
        Error::InvariantViolation { field, message: message.into() }
    }

    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Parse { .. }
            | Error::InvariantViolation { .. }
            | Error::OutOfVocab { .. }
            | Error::WindowSizeMismatch { .. }
            | Error::SequenceTooShort { .. }
            | Error::EmptyInput
            | Error::LengthMismatch { .. }
            | Error::Json(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
