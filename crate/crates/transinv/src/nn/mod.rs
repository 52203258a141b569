//! Layer forward/backward implementations, initialization, optimizer and
//! loss. Backward passes are hand-written per layer; there is no autodiff
//! graph.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod dense;
pub mod init;
pub mod loss;
pub mod model;
pub mod pool;
pub mod relu;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use conv::{conv2d_backward, conv2d_forward, ConvLayer};
pub use dense::{dense_backward, dense_forward, DenseLayer};
pub use init::he_init;
pub use loss::{softmax_cross_entropy, softmax_rows};
pub use model::{Model, Tap};
pub use pool::{maxpool2d_backward, maxpool2d_forward, MaxPoolLayer, PoolIndices};
pub use relu::{relu, relu_backward};

use thiserror::Error;

use crate::tensor::ShapeError;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("conv: input has {got} channels but kernels expect {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("conv: {axis} {size} too small for kernel {kernel} with padding ({pad_lo},{pad_hi})")]
    InputTooSmall {
        axis: &'static str,
        size: usize,
        kernel: usize,
        pad_lo: usize,
        pad_hi: usize,
    },
    #[error("kernels must be square [out,in,k,k], got shape {shape:?}")]
    NonSquareKernel { shape: Vec<usize> },
    #[error("pool indices do not match this input/grad pair: {reason}")]
    StalePoolIndices { reason: String },
    #[error("label {label} at row {row} is outside 0..{classes}")]
    LabelOutOfRange {
        label: usize,
        row: usize,
        classes: usize,
    },
    #[error("adam: parameter {index} has shape {param:?} but {what} has shape {other:?}")]
    AdamShapeMismatch {
        index: usize,
        param: Vec<usize>,
        what: &'static str,
        other: Vec<usize>,
    },
    #[error("adam: {got} gradient tensors for {expected} parameters")]
    AdamArity { expected: usize, got: usize },
    #[error("unknown tap point `{0}` (expected `conv_final` or `fc_out`)")]
    UnknownTap(String),
    #[error("he_init: fan_in must be positive")]
    ZeroFanIn,
}

/// Fixed chunk length for sample-parallel reductions. Partial results are
/// combined in chunk order, so the outcome is independent of worker count.
pub(crate) const REDUCE_CHUNK: usize = 16;
