//! Differentiable-computation substrate: dense tensors, a reverse-mode
//! graph, standard layers, Adam, and the scalar transforms (symlog, two-hot,
//! Gaussian KL) the rest of the system is built on.

pub mod checkpoint;
pub mod fdcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod scalars;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Graph, Var};
pub use layers::{gru_cell, GruCell, LayerNorm, Linear, Mlp};
pub use params::{adam_step, clip_grad_norm, xavier_uniform, AdamHyper, ParamKey, ParamStore};
pub use scalars::{
    gaussian_kl, softplus_floor, symexp, symlog, twohot_decode, twohot_encode, DiagonalGaussian,
    ValueBins, STD_FLOOR,
};
pub use tensor::Tensor;

/// Failures reachable through the public differentiable API.
#[derive(Clone, Debug, thiserror::Error, PartialEq)]
pub enum DiffError {
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("NaN encountered during gradient propagation in primitive `{op}`")]
    NaN { op: &'static str },
    #[error("dimension mismatch: {what}")]
    DimMismatch { what: &'static str },
    #[error("invalid argument: {what}")]
    InvalidArg { what: &'static str },
}
