use thiserror::Error;

use crate::model::IoMode;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scale: {0}")]
    InvalidScale(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("unsupported padding: {0}")]
    UnsupportedPadding(String),

    #[error("io mode mismatch: layer is {actual:?}, operation needs {expected:?}")]
    ModeMismatch { expected: IoMode, actual: IoMode },

    #[error("invalid batchnorm parameters: {0}")]
    BatchNorm(String),

    #[error("zero weight in binary filter at index {0}")]
    ZeroWeight(usize),

    #[error("stream error: {0}")]
    Stream(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated model blob in layer {layer}: need {needed} bytes, {available} available")]
    Truncated {
        layer: usize,
        needed: usize,
        available: usize,
    },

    #[error("invariant violation in layer {layer}: {message}")]
    Invariant { layer: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid folding: {0}")]
    InvalidFolding(String),

    #[error("layer {layer} infeasible: fully parallel II {ii} exceeds budget {budget} cycles")]
    Infeasible { layer: usize, ii: u64, budget: u64 },

    #[error("device has no cost entry for datatype `{0}`")]
    MissingCost(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
