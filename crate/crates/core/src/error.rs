//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible operand shapes, reported with both offenders.
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// NaN or infinity encountered where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// An operation was called outside its contract (empty input, wrong mode).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value (off-grid layer count, bad schedule, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Architecture mask that cannot describe a runnable network.
    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    /// Local sampling failed repeatedly; the scale vector is too large for
    /// the configured space.
    #[error("sampling range error: {0}")]
    SamplingRange(String),

    /// Metric undefined because only one class is present.
    #[error("undefined metric: labels contain a single class")]
    SingleClass,

    /// Dataset file rejected, with the 1-based line number.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Persisted artifact has an unexpected version or digest.
    #[error("version mismatch: {0}")]
    Version(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
