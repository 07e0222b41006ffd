use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("timestamp {tau} outside [0, {duration}]")]
    TimestampOutOfRange { tau: f64, duration: f64 },

    #[error("time-bin index {index} outside [0, {n_bins})")]
    BinOutOfRange { index: usize, n_bins: usize },

    #[error("token id {0} is not a time token")]
    NotATimeToken(u32),

    #[error("step {step} outside [{lo}, {hi}]")]
    StepOutOfRange { step: usize, lo: usize, hi: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("shape mismatch for {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward called without a cached forward pass")]
    MissingCache,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown threshold grid `{0}` (expected thumos or anet)")]
    UnknownGrid(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
