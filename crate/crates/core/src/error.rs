use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    #[error("failed to load weights from {path}: {reason}")]
    WeightLoad { path: PathBuf, reason: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("neuron {neuron} out of range for feature dimension {dim}")]
    NeuronOutOfRange { neuron: usize, dim: usize },

    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("optimization produced a non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("no mistake samples qualify for ranking")]
    EmptyMistakeSet,

    #[error("encoder unavailable: {0}")]
    EncoderUnavailable(String),

    #[error("activation map is identically zero")]
    DegenerateMap,

    #[error("non-finite input to probability ratio")]
    NumericOverflow,

    #[error("training diverged at epoch {epoch}: cross-entropy {loss} exceeds 10x initial {initial}")]
    DivergenceDetected { epoch: usize, loss: f64, initial: f64 },

    #[error("class {class} has {count} samples; at least 2 are required to split")]
    ClassTooSmall { class: usize, count: usize },

    #[error("split is empty")]
    EmptySplit,

    #[error("reports were computed on different splits: {0}")]
    SplitMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png error: {0}")]
    Png(String),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
