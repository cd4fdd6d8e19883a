//! A small CPU tensor/layer engine for the quantification network.
//!
//! Batches are `(n, channels, rows, cols)` arrays of `f64`. Work is split
//! across samples in fixed-size chunks whose partial gradients are summed in
//! chunk order, so results do not depend on the number of worker threads.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod network;
pub mod train;

use ndarray::{Array3, Array4};
use thiserror::Error;

use crate::archive::ArchiveError;
use crate::preprocess::PreprocessError;

pub use self::adam::{adam_step, Adam, AdamState};
pub use self::checkpoint::Checkpoint;
pub use self::layers::{
    conv2d_backward, conv2d_forward, maxpool_backward, maxpool_forward, BatchNorm, Conv2d, Dense, Dropout, Layer,
    MaxPool, Padding, Relu, Softmax,
};
pub use self::loss::mse_loss;
pub use self::network::{build_network, LayerSpec, Network, NetworkConfig, ReductionVariant, SizeVariant};
pub use self::train::{evaluate_loss, train, train_datasets, EpochRecord, History, TrainConfig, TrainOutcome};

/// One sample: `(channels, rows, cols)`.
pub type Tensor = Array3<f64>;
/// A batch: `(n, channels, rows, cols)`.
pub type Batch = Array4<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("batch normalisation needs at least two samples per batch in training mode")]
    DegenerateBatch,
    #[error("architecture error: {0}")]
    Architecture(String),
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Divergence { epoch: usize, history: History },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> NnError {
    NnError::Shape(msg.into())
}

/// Samples per parallel work unit.
pub(crate) const CHUNK: usize = 4;
