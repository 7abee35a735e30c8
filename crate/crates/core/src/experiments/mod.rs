//! Training loops, datasets and the end-to-end experiment procedures.

pub mod data;
pub mod plateau;
pub mod runner;
pub mod train;

use thiserror::Error;

use crate::diagnostics::DiagnosticsError;
use crate::lifting::LiftError;
use crate::linalg::LinalgError;
use crate::network::{NetworkError, NetworkParams};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Lift(#[from] LiftError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {}{msg}", line.map(|n| format!("line {n}: ")).unwrap_or_default())]
    Data {
        path: String,
        line: Option<usize>,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        /// Last finite parameters and the log up to them.
        state: Box<(NetworkParams, train::TrainLog)>,
    },
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<ExperimentError>,
    },
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

impl ExperimentError {
    /// Divergence or a numerical routine that failed to converge, as
    /// opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            ExperimentError::Network(e) => e.is_numerical(),
            ExperimentError::Lift(e) => e.is_numerical(),
            ExperimentError::Diagnostics(e) => e.is_numerical(),
            ExperimentError::Linalg(e) => e.is_numerical(),
            ExperimentError::Diverged { .. } => true,
            ExperimentError::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
