//! Fully-connected networks: parameters, batched forward pass with feature
//! capture, analytic backpropagation, losses and finite-difference Hessians.
//!
//! Layer `l` (1-based, `l = 1..=L`) maps `f^[l-1]` to
//! `f^[l] = σ(BN(W^[l] f^[l-1] + b^[l]))` for hidden layers and to the affine
//! output `W^[L] f^[L-1] + b^[L]` for the last one. Vectors indexed by layer
//! in this module are 0-based, so `layers[l - 1]` holds layer `l`.

mod activation;
mod dataset;
mod forward;
mod hessian;
mod io;
mod params;

pub use activation::{Activation, ActivationSpec, AffineSubdomain};
pub use dataset::{argmax, Dataset, LossKind};
pub use forward::{
    backprop, forward, forward_batch, loss, loss_and_grad, predict, risk, BnCache, ForwardTrace,
    GradientBundle,
};
pub use hessian::{hessian_fd, HessianFd, DEFAULT_HESSIAN_CAP};
pub use io::{load_weights, save_weights, WeightFile};
pub use params::{BatchNorm, InitConfig, Layer, NetworkParams};

use thiserror::Error;

use crate::linalg::LinalgError;

/// Small constant added inside the batch standard deviation.
pub const BN_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("batch normalisation needs a batch of at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("parameter count {count} exceeds the Hessian cap {cap}")]
    TooManyParameters { count: usize, cap: usize },
    #[error("unknown loss kind `{0}`")]
    UnknownLoss(String),
    #[error("weight file: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, NetworkError>;

impl NetworkError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, NetworkError::Linalg(e) if e.is_numerical())
    }
}
