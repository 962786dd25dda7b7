//! Stage-wise training, inference and checkpoints.

mod gradsuite;
mod optim;
mod schedule;
mod train;

use thiserror::Error;

pub use gradsuite::{end_to_end_gradcheck, gradient_suite, SuiteEntry};
pub use optim::{clip_grad_norm, grad_norm, OptimizerInfo, Sgd};
pub use schedule::{lr_at, Stage, TrainSchedule};
pub use train::{
    backbone_checksum, detection_features, infer, load_model, read_checkpoint, toy_dataset, train, train_backbone,
    train_detection, write_checkpoint, CheckpointHeader, EpochRecord, Inference, StepRecord, TrainConfig, TrainReport,
    TrainingSample,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("the dataset is empty")]
    EmptyDataset,
    #[error("loss diverged in stage {} at step {step}", stage.name())]
    DivergedLoss { stage: Stage, step: usize },
    #[error("epoch {epoch} is outside a {epochs}-epoch schedule")]
    OutOfRange { epoch: usize, epochs: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Network(#[from] crate::networks::NetworkError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Data(#[from] crate::data_io::DataError),
    #[error(transparent)]
    Grid(#[from] crate::voxel_grid::GridError),
    #[error(transparent)]
    Postproc(#[from] crate::postproc::PostprocError),
    #[error(transparent)]
    Eval(#[from] crate::evaluation::EvalError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
