//! Multi-modal late-fusion convolutional network.
//!
//! Each modality is routed to its own encoder of Conv-BatchNorm-ReLU blocks
//! (max pooling after every block but the last, global average pooling at
//! the end). The per-modality embeddings are concatenated and classified by
//! a shared two-layer head with dropout.

pub mod checkpoint;
mod config;
pub mod kernels;
mod network;

use thiserror::Error;

pub use config::{ModelConfig, SpatialRank};
pub use kernels::{Dims, Real};
pub use network::{
    softmax, softmax_cross_entropy, BatchNormStats, ForwardCache, ForwardTrace, Gradients, InputBatch, Mode,
    NetworkParameters, ParamTensor, TensorKind,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
