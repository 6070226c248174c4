use thiserror::Error;

pub type Result<T, E = WorkbenchError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum WorkbenchError {
    #[error("unknown run {0}")]
    UnknownRun(String),

    #[error("unknown job {0}")]
    UnknownJob(String),

    #[error("neuron {neuron} out of range for feature dimension {dim}")]
    UnknownNeuron { neuron: usize, dim: usize },

    #[error("run {0} has no ranking")]
    NoRanking(String),

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("artifact {0} is missing or was modified")]
    Artifact(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] neurodebug::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
