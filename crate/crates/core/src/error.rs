use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("relaxation times must be positive (t1 = {t1_ms} ms, t2 = {t2_ms} ms)")]
    InvalidRelaxation { t1_ms: f64, t2_ms: f64 },

    #[error("line {line}: {message}")]
    ScheduleParse { line: usize, message: String },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("degenerate signal: {0}")]
    Degenerate(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "eigen-solver did not converge after {iterations} iterations (last change {change:e})"
    )]
    NotConverged { iterations: usize, change: f64 },

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { expected: u32, found: u32 },

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
