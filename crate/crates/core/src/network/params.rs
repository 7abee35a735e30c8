use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ActivationSpec, NetworkError, Result};
use crate::linalg::{Matrix, Vector};

/// One affine layer `(W^[l], b^[l])`.
///
/// With `residual` set the layer reads `f^[l-1] + f^[l-2]` instead of
/// `f^[l-1]`, i.e. it closes a skip connection around the layer before it.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vector,
    pub residual: bool,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vector) -> Self {
        Layer {
            weight,
            bias,
            residual: false,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Batch-norm scale and shift for one hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vector,
    pub beta: Vector,
    pub enabled: bool,
}

impl BatchNorm {
    pub fn new(width: usize, gamma: f64) -> Self {
        BatchNorm {
            gamma: Vector::filled(width, gamma),
            beta: Vector::zeros(width),
            enabled: true,
        }
    }
}

/// Parameters `θ = (W^[1], b^[1], …, W^[L], b^[L])` of a fully-connected
/// network, plus optional batch-norm state for each hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    widths: Vec<usize>,
    layers: Vec<Layer>,
    activation: ActivationSpec,
    batch_norm: Option<Vec<BatchNorm>>,
}

impl NetworkParams {
    pub fn new(
        activation: ActivationSpec,
        layers: Vec<Layer>,
        batch_norm: Option<Vec<BatchNorm>>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(NetworkError::Shape(
                "a network needs at least one layer".into(),
            ));
        }
        let mut widths = vec![layers[0].in_dim()];
        for (i, layer) in layers.iter().enumerate() {
            let l = i + 1;
            if layer.in_dim() != widths[i] {
                return Err(NetworkError::Shape(format!(
                    "layer {l}: W is {}x{} but the previous width is {}",
                    layer.out_dim(),
                    layer.in_dim(),
                    widths[i]
                )));
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(NetworkError::Shape(format!(
                    "layer {l}: bias length {} for {} outputs",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if !layer.weight.is_finite() || !layer.bias.is_finite() {
                return Err(NetworkError::Shape(format!(
                    "layer {l}: non-finite parameters"
                )));
            }
            if layer.residual && (l < 2 || widths[i] != widths[i - 1]) {
                return Err(NetworkError::Shape(format!(
                    "layer {l}: a residual layer needs m_{} == m_{}",
                    l - 1,
                    l.saturating_sub(2)
                )));
            }
            widths.push(layer.out_dim());
        }
        if let Some(bn) = &batch_norm {
            if bn.len() != layers.len() - 1 {
                return Err(NetworkError::Shape(format!(
                    "{} batch-norm entries for {} hidden layers",
                    bn.len(),
                    layers.len() - 1
                )));
            }
            for (i, b) in bn.iter().enumerate() {
                if b.gamma.len() != widths[i + 1] || b.beta.len() != widths[i + 1] {
                    return Err(NetworkError::Shape(format!(
                        "batch-norm {} has the wrong width",
                        i + 1
                    )));
                }
            }
        }
        Ok(NetworkParams {
            widths,
            layers,
            activation,
            batch_norm,
        })
    }

    /// Gaussian initialisation with mean 0 and the given variance for every
    /// weight and bias.
    pub fn init_gaussian<R: Rng>(
        widths: &[usize],
        activation: ActivationSpec,
        init: &InitConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(NetworkError::Shape(
                "need at least input and output widths".into(),
            ));
        }
        if !(init.variance >= 0.0) {
            return Err(NetworkError::Shape(format!(
                "invalid init variance {}",
                init.variance
            )));
        }
        let normal = Normal::new(0.0, init.variance.sqrt()).expect("finite std");
        let layers = widths
            .windows(2)
            .map(|w| {
                let weight = Matrix::from_fn(w[1], w[0], |_, _| normal.sample(rng));
                let bias: Vec<f64> = (0..w[1]).map(|_| normal.sample(rng)).collect();
                Layer::new(weight, bias.into())
            })
            .collect();
        let bn = init.batch_norm_gamma.map(|g| {
            widths[1..widths.len() - 1]
                .iter()
                .map(|&m| BatchNorm::new(m, g))
                .collect()
        });
        NetworkParams::new(activation, layers, bn)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Number of affine layers `L`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Layer `l`, 1-based.
    pub fn layer(&self, l: usize) -> &Layer {
        &self.layers[l - 1]
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn activation(&self) -> &ActivationSpec {
        &self.activation
    }

    pub fn batch_norm(&self) -> Option<&[BatchNorm]> {
        self.batch_norm.as_deref()
    }

    /// Batch-norm of hidden layer `l` (1-based), when enabled.
    pub fn bn_at(&self, l: usize) -> Option<&BatchNorm> {
        self.batch_norm
            .as_ref()
            .and_then(|bn| bn.get(l.checked_sub(1)?))
            .filter(|b| b.enabled)
    }

    pub fn has_batch_norm(&self) -> bool {
        self.batch_norm
            .as_ref()
            .is_some_and(|bn| bn.iter().any(|b| b.enabled))
    }

    pub fn has_residual(&self) -> bool {
        self.layers.iter().any(|l| l.residual)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Total number of trainable scalars, batch-norm included.
    pub fn param_count(&self) -> usize {
        let affine: usize = self
            .layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum();
        let bn: usize = self
            .batch_norm
            .iter()
            .flatten()
            .filter(|b| b.enabled)
            .map(|b| 2 * b.gamma.len())
            .sum();
        affine + bn
    }

    /// Parameters in canonical flat order: for each layer `W` (row-major)
    /// then `b`; afterwards `γ` then `β` of each enabled batch-norm layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        for b in self.batch_norm.iter().flatten().filter(|b| b.enabled) {
            out.extend_from_slice(&b.gamma);
            out.extend_from_slice(&b.beta);
        }
        out
    }

    /// Same architecture with parameters replaced from `flat` (see
    /// [`NetworkParams::flatten`] for the order).
    pub fn with_flat(&self, flat: &[f64]) -> Result<NetworkParams> {
        if flat.len() != self.param_count() {
            return Err(NetworkError::Shape(format!(
                "flat vector of length {} for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut out = self.clone();
        let mut pos = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[pos..pos + dst.len()]);
            pos += dst.len();
        };
        for l in &mut out.layers {
            take(l.weight.as_mut_slice());
            take(&mut l.bias);
        }
        for b in out.batch_norm.iter_mut().flatten().filter(|b| b.enabled) {
            take(&mut b.gamma);
            take(&mut b.beta);
        }
        Ok(out)
    }

    /// In-place `θ ← θ + scale · Δ` with `Δ` in flat order.
    pub fn axpy_flat(&mut self, scale: f64, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.param_count());
        let mut pos = 0;
        let mut step = |dst: &mut [f64]| {
            let len = dst.len();
            for (d, g) in dst.iter_mut().zip(&delta[pos..pos + len]) {
                *d += scale * g;
            }
            pos += len;
        };
        for l in &mut self.layers {
            step(l.weight.as_mut_slice());
            step(&mut l.bias);
        }
        for b in self.batch_norm.iter_mut().flatten().filter(|b| b.enabled) {
            step(&mut b.gamma);
            step(&mut b.beta);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|x| x.is_finite())
    }
}

/// Initialisation settings kept in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Variance of the zero-mean Gaussian used for every weight and bias.
    pub variance: f64,
    /// Initial `γ` of batch-norm layers; `None` disables batch-norm.
    #[serde(default)]
    pub batch_norm_gamma: Option<f64>,
}
