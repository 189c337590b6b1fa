use std::path::PathBuf;

use mimq_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("config: {0}")]
    Config(String),

    #[error("mask: {0}")]
    Mask(String),

    #[error("grid mismatch: plan is {plan_h}x{plan_w}, patch grid is {grid_h}x{grid_w}")]
    GridMismatch {
        plan_h: usize,
        plan_w: usize,
        grid_h: usize,
        grid_w: usize,
    },

    #[error("scene config: {0}")]
    Scene(String),

    #[error("task: {0}")]
    Task(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("load policy `{policy}` requires parameters absent from the checkpoint: {missing:?}")]
    PolicyMissing { policy: String, missing: Vec<String> },

    #[error("parameter `{name}` has shape {found:?} in the checkpoint, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGrad { name: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("metric: {0}")]
    Metric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
