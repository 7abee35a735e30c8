//! Read-only analyses of a trained network: how linear each hidden layer is
//! on the data (MPC), whether the parameters are critical, the sign structure
//! of the Hessian, and how often two classifiers agree.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{pearson, sym_eig, LinalgError, Matrix};
use crate::network::{
    argmax, forward_batch, hessian_fd, loss_and_grad, predict, Dataset, ForwardTrace, NetworkError,
    NetworkParams,
};

/// Layers with MPC above this value are treated as effectively linear.
pub const DEFAULT_MPC_THRESHOLD: f64 = 0.99;
/// Neurons whose input-row and output-column norms are both below this are
/// zero-neurons and are left out of the MPC.
pub const ZERO_NEURON_TOL: f64 = 1e-6;
pub const DEFAULT_TAU: f64 = 1e-12;
pub const DEFAULT_CRITICAL_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("MPC needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("layer {layer} is not a hidden layer (network has {hidden} hidden layers)")]
    NotHiddenLayer { layer: usize, hidden: usize },
    #[error("prediction agreement needs a classifier; output width is {0}")]
    NotClassification(usize),
    #[error("networks disagree on shape: {0}")]
    ShapeMismatch(String),
}

pub type Result<T> = std::result::Result<T, DiagnosticsError>;

impl DiagnosticsError {
    pub fn is_numerical(&self) -> bool {
        match self {
            DiagnosticsError::Network(e) => e.is_numerical(),
            DiagnosticsError::Linalg(e) => e.is_numerical(),
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMpc {
    /// 1-based hidden layer index.
    pub layer: usize,
    /// Minimum unmasked `|ρ|`; `None` when every neuron is masked.
    pub mpc: Option<f64>,
    /// `|ρ_j|` per neuron, `None` for masked neurons.
    pub neuron_rho: Vec<Option<f64>>,
    pub zero_neurons: Vec<bool>,
    pub constant_neurons: Vec<bool>,
}

impl LayerMpc {
    pub fn zero_count(&self) -> usize {
        self.zero_neurons.iter().filter(|&&z| z).count()
    }

    pub fn constant_count(&self) -> usize {
        self.constant_neurons
            .iter()
            .zip(&self.zero_neurons)
            .filter(|&(&c, &z)| c && !z)
            .count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcReport {
    pub layers: Vec<LayerMpc>,
    pub threshold: f64,
    /// Hidden layers whose MPC exceeds the threshold.
    pub flagged: Vec<usize>,
}

impl MpcReport {
    pub fn values(&self) -> Vec<Option<f64>> {
        self.layers.iter().map(|l| l.mpc).collect()
    }
}

fn is_zero_neuron(params: &NetworkParams, l: usize, j: usize) -> bool {
    let row = params.layer(l).weight.row(j);
    let next = &params.layer(l + 1).weight;
    let rn = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cn = (0..next.rows())
        .map(|r| next[(r, j)] * next[(r, j)])
        .sum::<f64>()
        .sqrt();
    rn.max(cn) < ZERO_NEURON_TOL
}

fn layer_mpc_from(
    params: &NetworkParams,
    pre: &Matrix,
    post: &Matrix,
    l: usize,
) -> Result<LayerMpc> {
    let m = pre.cols();
    let mut neuron_rho = Vec::with_capacity(m);
    let mut zero_neurons = Vec::with_capacity(m);
    let mut constant_neurons = Vec::with_capacity(m);
    for j in 0..m {
        let zero = is_zero_neuron(params, l, j);
        let c = pearson(&pre.column(j), &post.column(j))?;
        zero_neurons.push(zero);
        constant_neurons.push(c.constant);
        neuron_rho.push(if zero || c.constant {
            None
        } else {
            Some(c.rho.abs())
        });
    }
    let mpc = neuron_rho.iter().flatten().cloned().reduce(f64::min);
    Ok(LayerMpc {
        layer: l,
        mpc,
        neuron_rho,
        zero_neurons,
        constant_neurons,
    })
}

/// MPC of hidden layer `l` (1-based).
pub fn mpc_layer(params: &NetworkParams, data: &Dataset, l: usize) -> Result<LayerMpc> {
    let hidden = params.hidden_layers();
    if l == 0 || l > hidden {
        return Err(DiagnosticsError::NotHiddenLayer { layer: l, hidden });
    }
    if data.len() < 2 {
        return Err(DiagnosticsError::TooFewSamples(data.len()));
    }
    let trace = forward_batch(params, data.inputs())?;
    layer_mpc_from(params, &trace.pre[l - 1], &trace.features[l], l)
}

/// MPC of every hidden layer from an existing forward pass.
pub fn mpc_from_trace(
    params: &NetworkParams,
    trace: &ForwardTrace,
    threshold: f64,
) -> Result<MpcReport> {
    if trace.samples() < 2 {
        return Err(DiagnosticsError::TooFewSamples(trace.samples()));
    }
    let layers = (1..=params.hidden_layers())
        .map(|l| layer_mpc_from(params, &trace.pre[l - 1], &trace.features[l], l))
        .collect::<Result<Vec<_>>>()?;
    let flagged = layers
        .iter()
        .filter(|r| r.mpc.is_some_and(|v| v > threshold))
        .map(|r| r.layer)
        .collect();
    Ok(MpcReport {
        layers,
        threshold,
        flagged,
    })
}

/// MPC of every hidden layer, with layers above `threshold` flagged.
pub fn mpc(params: &NetworkParams, data: &Dataset, threshold: f64) -> Result<MpcReport> {
    if data.len() < 2 {
        return Err(DiagnosticsError::TooFewSamples(data.len()));
    }
    let trace = forward_batch(params, data.inputs())?;
    mpc_from_trace(params, &trace, threshold)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalityReport {
    pub grad_l1: f64,
    pub is_critical: bool,
    pub tolerance: f64,
}

/// L1 norm of the full-batch gradient, compared against `tol`.
pub fn criticality(params: &NetworkParams, data: &Dataset, tol: f64) -> Result<CriticalityReport> {
    let (_, g) = loss_and_grad(params, data)?;
    let grad_l1 = g.l1_norm();
    Ok(CriticalityReport {
        grad_l1,
        is_critical: grad_l1 < tol,
        tolerance: tol,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumClass {
    LocalMinOrNonstrictSaddle,
    StrictSaddle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub tau: f64,
    pub negative: usize,
    pub zero: usize,
    pub positive: usize,
    pub classification: SpectrumClass,
    /// Relative asymmetry of the finite-difference Hessian before it was
    /// symmetrised; 0 when the matrix was supplied directly.
    pub asymmetry_rel: f64,
}

impl SpectrumReport {
    /// Classifies eigenvalues of an already-assembled symmetric matrix.
    pub fn from_eigenvalues(mut eigenvalues: Vec<f64>, tau: f64, asymmetry_rel: f64) -> Self {
        eigenvalues.sort_by(f64::total_cmp);
        let negative = eigenvalues.iter().filter(|&&v| v < -tau).count();
        let positive = eigenvalues.iter().filter(|&&v| v > tau).count();
        let zero = eigenvalues.len() - negative - positive;
        let classification = if negative >= 1 {
            SpectrumClass::StrictSaddle
        } else {
            SpectrumClass::LocalMinOrNonstrictSaddle
        };
        SpectrumReport {
            eigenvalues,
            tau,
            negative,
            zero,
            positive,
            classification,
            asymmetry_rel,
        }
    }

    /// Writes `index,eigenvalue` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "eigenvalue"])?;
        for (i, v) in self.eigenvalues.iter().enumerate() {
            w.write_record([i.to_string(), format!("{v:?}")])?;
        }
        w.flush()
    }
}

pub fn spectrum_of_matrix(h: &Matrix, tau: f64) -> Result<SpectrumReport> {
    let eig = sym_eig(h)?;
    Ok(SpectrumReport::from_eigenvalues(
        eig.values.into_inner(),
        tau,
        0.0,
    ))
}

/// Eigenvalues of the finite-difference Hessian of the empirical risk.
pub fn spectrum(
    params: &NetworkParams,
    data: &Dataset,
    tau: f64,
    cap: usize,
) -> Result<SpectrumReport> {
    let h = hessian_fd(params, data, cap)?;
    let eig = sym_eig(&h.matrix)?;
    Ok(SpectrumReport::from_eigenvalues(
        eig.values.into_inner(),
        tau,
        h.asymmetry_rel,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// Fraction of inputs with equal argmax.
    pub agreement: f64,
    /// `counts[i][j]`: inputs that model A labels `j` and model B labels `i`.
    pub counts: Vec<Vec<usize>>,
    /// `counts` with every column `j` divided by its total (0 for an empty
    /// column).
    pub ratios: Vec<Vec<f64>>,
}

pub fn prediction_agreement(
    a: &NetworkParams,
    b: &NetworkParams,
    inputs: &Matrix,
) -> Result<AgreementReport> {
    let classes = a.output_dim();
    if classes < 2 {
        return Err(DiagnosticsError::NotClassification(classes));
    }
    if b.output_dim() != classes || b.input_dim() != a.input_dim() {
        return Err(DiagnosticsError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.widths(),
            b.widths()
        )));
    }
    let pa = predict(a, inputs)?;
    let pb = predict(b, inputs)?;
    let mut counts = vec![vec![0usize; classes]; classes];
    let mut same = 0usize;
    for r in 0..inputs.rows() {
        let ia = argmax(pa.row(r));
        let ib = argmax(pb.row(r));
        counts[ib][ia] += 1;
        same += usize::from(ia == ib);
    }
    let col_totals: Vec<usize> = (0..classes)
        .map(|j| counts.iter().map(|row| row[j]).sum())
        .collect();
    let ratios = counts
        .iter()
        .map(|row| {
            row.iter()
                .zip(&col_totals)
                .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
                .collect()
        })
        .collect();
    Ok(AgreementReport {
        agreement: same as f64 / inputs.rows() as f64,
        counts,
        ratios,
    })
}
