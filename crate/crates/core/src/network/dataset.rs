use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{NetworkError, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `(1/n) Σ ‖f(x_i) − y_i‖²`, no ½ and no division by the output width.
    Mse,
    /// Softmax cross-entropy against one-hot (or probability) targets.
    CrossEntropy,
}

impl FromStr for LossKind {
    type Err = NetworkError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            other => Err(NetworkError::UnknownLoss(other.to_string())),
        }
    }
}

/// Training inputs (one sample per row) and matching targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    targets: Matrix,
    loss: LossKind,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Matrix, loss: LossKind) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(NetworkError::EmptyDataset);
        }
        if inputs.rows() != targets.rows() {
            return Err(NetworkError::Shape(format!(
                "{} input rows but {} target rows",
                inputs.rows(),
                targets.rows()
            )));
        }
        Ok(Dataset {
            inputs,
            targets,
            loss,
        })
    }

    /// Classification dataset from integer labels.
    pub fn from_labels(inputs: Matrix, labels: &[usize], classes: usize) -> Result<Self> {
        let mut targets = Matrix::zeros(labels.len(), classes);
        for (i, &c) in labels.iter().enumerate() {
            if c >= classes {
                return Err(NetworkError::Shape(format!(
                    "label {c} out of range for {classes} classes"
                )));
            }
            targets[(i, c)] = 1.0;
        }
        Dataset::new(inputs, targets, LossKind::CrossEntropy)
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.cols()
    }

    /// Every target row is a one-hot vector over at least two classes.
    pub fn is_one_hot(&self) -> bool {
        self.output_dim() >= 2
            && (0..self.len()).all(|i| {
                let row = self.targets.row(i);
                row.iter().filter(|&&v| v == 1.0).count() == 1
                    && row.iter().all(|&v| v == 0.0 || v == 1.0)
            })
    }

    /// Rows `indices` (in the given order) as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(NetworkError::Shape(format!(
                "subset index {bad} out of range {}",
                self.len()
            )));
        }
        let pick = |m: &Matrix| Matrix::from_fn(indices.len(), m.cols(), |r, c| m[(indices[r], c)]);
        Dataset::new(pick(&self.inputs), pick(&self.targets), self.loss)
    }

    /// Argmax of each target row.
    pub fn labels(&self) -> Vec<usize> {
        (0..self.len())
            .map(|i| argmax(self.targets.row(i)))
            .collect()
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self
    }
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
