//! Critical lifting: inserting a hidden layer that is affine on the training
//! data so the deeper network computes exactly the same outputs, checking
//! that a deeper network is such a lift, and merging effectively linear
//! layers back into their neighbours.
//!
//! Layers are 1-based as in [`crate::network`]. A plan with
//! `insert_after = q` places the new layer `q̂` between layers `q` and `q + 1`;
//! in the lifted network `q̂` is layer `q + 1` and the old layer `q + 1`
//! becomes layer `q + 2`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{self, DiagnosticsError};
use crate::linalg::{
    lstsq_affine, matmul, orthonormal_basis, projection_residual, LinalgError, Matrix, Vector,
};
use crate::network::{
    forward_batch, ActivationSpec, AffineSubdomain, Dataset, Layer, NetworkError, NetworkParams,
};

/// Relative tolerance of the condition-iii residuals.
pub const MEMBERSHIP_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum LiftError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error("invalid lift plan: {0}")]
    InvalidPlan(String),
    #[error("unsupported network: {0}")]
    Unsupported(String),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("lift step {index}: {source}")]
    Step {
        index: usize,
        #[source]
        source: Box<LiftError>,
    },
}

pub type Result<T> = std::result::Result<T, LiftError>;

impl LiftError {
    pub fn is_numerical(&self) -> bool {
        match self {
            LiftError::Network(e) => e.is_numerical(),
            LiftError::Linalg(e) => e.is_numerical(),
            LiftError::Diagnostics(e) => e.is_numerical(),
            LiftError::Step { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorSide {
    /// Factor through the narrower of `m_q` and `m_{q+1}`; ties go to
    /// `m_{q+1}`.
    #[default]
    Auto,
    /// The inserted layer reproduces the pre-activations of layer `q + 1`.
    MatchNext,
    /// The inserted layer reproduces `f^[q]`.
    MatchPrev,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseTaken {
    NextNarrower,
    PrevNarrower,
    DegenerateConstant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftPlan {
    pub insert_after: usize,
    pub inserted_width: usize,
    /// `[x_low, x_up]`; the activation's default interval when absent.
    #[serde(default)]
    pub target_interval: Option<[f64; 2]>,
    #[serde(default)]
    pub residual: bool,
    #[serde(default)]
    pub factor_side: FactorSide,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    Next,
    Prev,
}

impl LiftPlan {
    pub fn new(insert_after: usize, inserted_width: usize) -> Self {
        LiftPlan {
            insert_after,
            inserted_width,
            target_interval: None,
            residual: false,
            factor_side: FactorSide::Auto,
        }
    }

    /// Narrowest admissible plan at position `q`.
    pub fn minimal(params: &NetworkParams, q: usize) -> Self {
        let w = params.widths();
        let width = match (w.get(q), w.get(q + 1)) {
            (Some(&a), Some(&b)) => a.min(b),
            _ => 0,
        };
        LiftPlan::new(q, width)
    }

    /// Residual plan at position `q`; the inserted width must equal `m_q`.
    pub fn residual(params: &NetworkParams, q: usize) -> Self {
        let width = params.widths().get(q).copied().unwrap_or(0);
        LiftPlan {
            residual: true,
            ..LiftPlan::new(q, width)
        }
    }

    pub fn with_interval(mut self, lo: f64, hi: f64) -> Self {
        self.target_interval = Some([lo, hi]);
        self
    }

    pub fn with_side(mut self, side: FactorSide) -> Self {
        self.factor_side = side;
        self
    }

    pub fn interval(&self, act: &ActivationSpec) -> (f64, f64) {
        match self.target_interval {
            Some([lo, hi]) => (lo, hi),
            None => act.default_interval(),
        }
    }

    /// Checks the plan against `params` and returns the affine segment that
    /// holds the target interval.
    fn check(&self, params: &NetworkParams) -> Result<(Side, AffineSubdomain)> {
        let widths = params.widths();
        let q = self.insert_after;
        if q >= params.depth() {
            return Err(LiftError::InvalidPlan(format!(
                "insert_after {q} out of range for {} layers",
                params.depth()
            )));
        }
        if params.has_batch_norm() {
            return Err(LiftError::Unsupported(
                "batch-norm networks cannot be lifted".into(),
            ));
        }
        let touches_skip = params.layer(q + 1).residual
            || (q + 2 <= params.depth() && params.layer(q + 2).residual);
        if touches_skip {
            return Err(LiftError::Unsupported(format!(
                "layer {} or {} already closes a skip connection",
                q + 1,
                q + 2
            )));
        }
        let act = params.activation();
        let (lo, hi) = self.interval(act);
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(LiftError::InvalidPlan(format!(
                "target interval [{lo}, {hi}] needs x_low < x_up"
            )));
        }
        let sub = act
            .subdomains()
            .into_iter()
            .find(|d| d.contains_closed(lo, hi))
            .ok_or_else(|| {
                LiftError::InvalidPlan(format!(
                    "[{lo}, {hi}] is not inside an affine segment of {:?}",
                    act.kind
                ))
            })?;
        let (mq, mn) = (widths[q], widths[q + 1]);
        let m = self.inserted_width;
        if m < mq.min(mn) {
            return Err(LiftError::InvalidPlan(format!(
                "inserted width {m} is below min(m_{q}, m_{}) = {}",
                q + 1,
                mq.min(mn)
            )));
        }
        if self.residual {
            if m != mq {
                return Err(LiftError::InvalidPlan(format!(
                    "a residual block needs inserted width m_{q} = {mq}, got {m}"
                )));
            }
            if self.factor_side == FactorSide::MatchNext {
                return Err(LiftError::InvalidPlan(
                    "a residual block factors through f^[q]".into(),
                ));
            }
            return Ok((Side::Prev, sub));
        }
        let side = match self.factor_side {
            FactorSide::Auto if mn <= mq => Side::Next,
            FactorSide::Auto => Side::Prev,
            FactorSide::MatchNext => Side::Next,
            FactorSide::MatchPrev => Side::Prev,
        };
        let need = if side == Side::Next { mn } else { mq };
        if m < need {
            return Err(LiftError::InvalidPlan(format!(
                "inserted width {m} cannot hold the {need} factored neurons"
            )));
        }
        Ok((side, sub))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LiftRecord {
    pub source: NetworkParams,
    pub result: NetworkParams,
    /// The plan with its target interval filled in.
    pub plan: LiftPlan,
    /// Slope `λ_j` of the segment holding each inserted neuron.
    pub lambda: Vector,
    pub mu: Vector,
    pub xi: f64,
    pub case_taken: CaseTaken,
    /// Smallest distance of each inserted neuron's pre-activations to its
    /// segment boundary over the data.
    pub margins: Vec<f64>,
}

/// Sidecar written next to lifted weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftSidecar {
    pub plan: LiftPlan,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub xi: f64,
    pub case_taken: CaseTaken,
    pub margins: Vec<f64>,
}

impl LiftRecord {
    pub fn sidecar(&self) -> LiftSidecar {
        LiftSidecar {
            plan: self.plan.clone(),
            lambda: self.lambda.to_vec(),
            mu: self.mu.to_vec(),
            xi: self.xi,
            case_taken: self.case_taken,
            margins: self.margins.clone(),
        }
    }
}

fn min_max(m: &Matrix) -> (f64, f64) {
    m.as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

/// Builds one member of the lifted set: the deeper network plus the
/// per-neuron affine data of the inserted layer.
pub fn one_layer_lift(
    params: &NetworkParams,
    data: &Dataset,
    plan: &LiftPlan,
) -> Result<LiftRecord> {
    let (side, sub) = plan.check(params)?;
    let q = plan.insert_after;
    let (lo, hi) = plan.interval(params.activation());
    let widths = params.widths();
    let (mq, mn, m) = (widths[q], widths[q + 1], plan.inserted_width);
    let next = params.layer(q + 1);

    let trace = forward_batch(params, data.inputs())?;
    let values = match side {
        Side::Next => &trace.pre[q],
        Side::Prev => &trace.features[q],
    };
    let (x_min, x_max) = min_max(values);
    let mid = 0.5 * (lo + hi);
    let (xi, shift, degenerate) = if x_max == x_min {
        (1.0, mid - x_min, true)
    } else {
        let xi = (hi - lo) / (x_max - x_min);
        (xi, lo - xi * x_min, false)
    };
    let (lam, mu) = (sub.slope, sub.intercept);

    let mut w_hat = Matrix::zeros(m, mq);
    let mut b_hat = Vector::filled(m, mid);
    let mut w_out = Matrix::zeros(mn, m);
    match side {
        Side::Next => {
            for j in 0..mn {
                for c in 0..mq {
                    w_hat.row_mut(j)[c] = xi * next.weight[(j, c)];
                }
                b_hat[j] = xi * next.bias[j] + shift;
                w_out.row_mut(j)[j] = 1.0 / (lam * xi);
            }
        }
        Side::Prev => {
            let denom = if plan.residual {
                lam * xi + 1.0
            } else {
                lam * xi
            };
            if denom == 0.0 {
                return Err(LiftError::InvalidPlan(
                    "λξ + 1 vanishes for this segment and data".into(),
                ));
            }
            for j in 0..mq {
                w_hat.row_mut(j)[j] = xi;
                b_hat[j] = shift;
            }
            for r in 0..mn {
                for c in 0..mq {
                    w_out.row_mut(r)[c] = next.weight[(r, c)] / denom;
                }
            }
        }
    }
    let lambda = Vector::filled(m, lam);
    let mu_v = Vector::filled(m, mu);
    let act_val: Vec<f64> = b_hat.iter().map(|b| lam * b + mu).collect();
    let pushed = w_out.mul_vec(&act_val)?;
    let b_out: Vec<f64> = next.bias.iter().zip(&pushed).map(|(b, p)| b - p).collect();

    let mut layers = params.layers().to_vec();
    let mut out_layer = Layer::new(w_out, Vector::from(b_out));
    out_layer.residual = plan.residual;
    layers.splice(q..q + 1, [Layer::new(w_hat, b_hat), out_layer]);
    let result = NetworkParams::new(*params.activation(), layers, None)?;

    let lifted_trace = forward_batch(&result, data.inputs())?;
    let check = linearization(params.activation(), &lifted_trace.pre[q]);
    let case_taken = if degenerate {
        CaseTaken::DegenerateConstant
    } else if side == Side::Next {
        CaseTaken::NextNarrower
    } else {
        CaseTaken::PrevNarrower
    };
    let mut resolved = plan.clone();
    resolved.target_interval = Some([lo, hi]);
    Ok(LiftRecord {
        source: params.clone(),
        result,
        plan: resolved,
        lambda,
        mu: mu_v,
        xi,
        case_taken,
        margins: check.neuron_margins,
    })
}

/// Residual variant of [`one_layer_lift`]: the inserted block is skipped
/// around, so the next layer reads `f^[q̂] + f^[q]`.
pub fn residual_lift(
    params: &NetworkParams,
    data: &Dataset,
    plan: &LiftPlan,
) -> Result<LiftRecord> {
    if !plan.residual {
        return Err(LiftError::InvalidPlan(
            "residual_lift needs a plan with residual = true".into(),
        ));
    }
    one_layer_lift(params, data, plan)
}

/// Applies `plans` in order, each against the network produced by the
/// previous step.
pub fn multi_layer_lift(
    params: &NetworkParams,
    data: &Dataset,
    plans: &[LiftPlan],
) -> Result<(NetworkParams, Vec<LiftRecord>)> {
    let mut current = params.clone();
    let mut records = Vec::with_capacity(plans.len());
    for (index, plan) in plans.iter().enumerate() {
        let rec = one_layer_lift(&current, data, plan).map_err(|e| LiftError::Step {
            index,
            source: Box::new(e),
        })?;
        current = rec.result.clone();
        records.push(rec);
    }
    Ok((current, records))
}

/// Residual block whose inserted layer ignores its input: `W'^[q̂] = 0` and
/// every inserted pre-activation equals `c`. The following layer keeps `W`
/// and absorbs `W σ(c)` into its bias.
pub fn zero_block_residual(
    params: &NetworkParams,
    q: usize,
    c: f64,
) -> Result<(NetworkParams, LiftPlan)> {
    let plan = LiftPlan::residual(params, q);
    plan.check(params)?;
    let mq = params.widths()[q];
    let next = params.layer(q + 1);
    let sc = params.activation().eval(c);
    let pushed = next.weight.mul_vec(&vec![sc; mq])?;
    let b_out: Vec<f64> = next.bias.iter().zip(&pushed).map(|(b, p)| b - p).collect();
    let mut out_layer = Layer::new(next.weight.clone(), Vector::from(b_out));
    out_layer.residual = true;
    let mut layers = params.layers().to_vec();
    layers.splice(
        q..q + 1,
        [
            Layer::new(Matrix::zeros(mq, mq), Vector::filled(mq, c)),
            out_layer,
        ],
    );
    Ok((
        NetworkParams::new(*params.activation(), layers, None)?,
        plan,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub neuron: usize,
    pub sample: usize,
    pub value: f64,
}

struct Linearization {
    lambda: Vec<f64>,
    mu: Vec<f64>,
    neuron_margins: Vec<f64>,
    /// `margins[(i, j)]` for sample `i` and neuron `j`; negative outside.
    margins: Matrix,
    violations: Vec<Violation>,
}

fn linearization(act: &ActivationSpec, pre: &Matrix) -> Linearization {
    let subs = act.subdomains();
    let (n, m) = pre.shape();
    let mut lambda = Vec::with_capacity(m);
    let mut mu = Vec::with_capacity(m);
    let mut neuron_margins = Vec::with_capacity(m);
    let mut margins = Matrix::zeros(n, m);
    let mut violations = Vec::new();
    for j in 0..m {
        let first = pre[(0, j)];
        let sub = subs
            .iter()
            .find(|d| d.contains_strictly(first))
            .copied()
            .unwrap_or(act.affine_subdomain);
        let mut worst = f64::INFINITY;
        for i in 0..n {
            let v = pre[(i, j)];
            let mg = sub.margin(v);
            margins.row_mut(i)[j] = mg;
            worst = worst.min(mg);
            if !sub.contains_strictly(v) {
                violations.push(Violation {
                    neuron: j,
                    sample: i,
                    value: v,
                });
            }
        }
        lambda.push(sub.slope);
        mu.push(sub.intercept);
        neuron_margins.push(worst);
    }
    Linearization {
        lambda,
        mu,
        neuron_margins,
        margins,
        violations,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipReport {
    pub local_in_layer_ok: bool,
    /// Layers of the lifted network that differ from their originals.
    pub changed_layers: Vec<usize>,
    pub linearization_ok: bool,
    pub min_margin: f64,
    pub neuron_margins: Vec<f64>,
    pub violations: Vec<Violation>,
    pub output_preserving_ok: bool,
    /// Frobenius residual of the weight equation of condition iii.
    pub weight_residual: f64,
    /// Euclidean residual of the bias equation.
    pub bias_residual: f64,
    pub weight_tol: f64,
    pub bias_tol: f64,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    /// Set when the segment is only approximately affine (tanh).
    pub approx: bool,
    pub overall: bool,
}

fn same_bits(a: &Layer, b: &Layer) -> bool {
    a.residual == b.residual
        && a.weight.shape() == b.weight.shape()
        && a.weight
            .as_slice()
            .iter()
            .zip(b.weight.as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits())
        && a.bias.len() == b.bias.len()
        && a.bias
            .iter()
            .zip(b.bias.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Checks the three defining conditions of a one-layer lift of `source`
/// into `lifted` on `data`.
pub fn verify_membership(
    source: &NetworkParams,
    lifted: &NetworkParams,
    data: &Dataset,
    plan: &LiftPlan,
) -> Result<MembershipReport> {
    let q = plan.insert_after;
    let (sw, lw) = (source.widths(), lifted.widths());
    let mut expect = sw.to_vec();
    if q < source.depth() {
        expect.insert(q + 1, plan.inserted_width);
    }
    if q >= source.depth() || lw != expect.as_slice() {
        return Err(LiftError::ArchitectureMismatch(format!(
            "plan inserts {} neurons after layer {q} of {sw:?}, lifted widths are {lw:?}",
            plan.inserted_width
        )));
    }
    if source.activation().kind != lifted.activation().kind {
        return Err(LiftError::ArchitectureMismatch("activations differ".into()));
    }
    if lifted.layer(q + 2).residual != plan.residual || lifted.layer(q + 1).residual {
        return Err(LiftError::ArchitectureMismatch(
            "skip connection does not match the plan".into(),
        ));
    }
    if lifted.has_batch_norm() || source.has_batch_norm() {
        return Err(LiftError::Unsupported(
            "batch-norm networks cannot be lifted".into(),
        ));
    }

    let mut changed_layers = Vec::new();
    for l in 1..=source.depth() {
        if l == q + 1 {
            continue;
        }
        let l_new = if l <= q { l } else { l + 1 };
        if !same_bits(source.layer(l), lifted.layer(l_new)) {
            changed_layers.push(l_new);
        }
    }

    let trace = forward_batch(lifted, data.inputs())?;
    let lin = linearization(lifted.activation(), &trace.pre[q]);
    let min_margin = lin
        .neuron_margins
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);

    let orig = source.layer(q + 1);
    let hat = lifted.layer(q + 1);
    let out = lifted.layer(q + 2);
    let lam_hat = hat.weight.scale_rows(&lin.lambda)?;
    let mut prod = matmul(&out.weight, &lam_hat)?;
    if plan.residual {
        prod = prod.add(&out.weight)?;
    }
    let weight_residual = prod.sub(&orig.weight)?.frobenius();
    let weight_scale = 1f64
        .max(orig.weight.frobenius())
        .max(out.weight.frobenius() * lam_hat.frobenius());
    let inner: Vec<f64> = (0..hat.bias.len())
        .map(|j| lin.lambda[j] * hat.bias[j] + lin.mu[j])
        .collect();
    let pushed = out.weight.mul_vec(&inner)?;
    let bias_residual = pushed
        .iter()
        .zip(out.bias.iter())
        .zip(orig.bias.iter())
        .map(|((p, b2), b)| (p + b2 - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let bias_scale = 1f64
        .max(Vector::from(orig.bias.to_vec()).norm())
        .max(out.weight.frobenius() * Vector::from(inner).norm());
    let weight_tol = MEMBERSHIP_TOL * weight_scale;
    let bias_tol = MEMBERSHIP_TOL * bias_scale;

    let local_in_layer_ok = changed_layers.is_empty();
    let linearization_ok = lin.violations.is_empty();
    let output_preserving_ok = weight_residual <= weight_tol && bias_residual <= bias_tol;
    Ok(MembershipReport {
        local_in_layer_ok,
        changed_layers,
        linearization_ok,
        min_margin,
        neuron_margins: lin.neuron_margins,
        violations: lin.violations,
        output_preserving_ok,
        weight_residual,
        bias_residual,
        weight_tol,
        bias_tol,
        lambda: lin.lambda,
        mu: lin.mu,
        approx: lifted.activation().approx,
        overall: local_in_layer_ok && linearization_ok && output_preserving_ok,
    })
}

/// Radius `r_i` around each training input such that every `x` with
/// `‖x − x_i‖_∞ ≤ r_i` keeps the inserted layer of `lifted` (inserted after
/// layer `q`) inside its segments, at half the margin.
///
/// Layers `1..=q` move `f^[q]` by at most `c_q ‖δ‖_∞`, where `c_q` multiplies
/// the activation's Lipschitz constant with the largest row L1 norm of each
/// weight matrix.
pub fn neighborhood_radii(lifted: &NetworkParams, data: &Dataset, q: usize) -> Result<Vec<f64>> {
    if q + 1 >= lifted.depth() {
        return Err(LiftError::ArchitectureMismatch(format!(
            "no inserted hidden layer after layer {q}"
        )));
    }
    let lip = lifted.activation().lipschitz();
    let mut c = vec![1.0f64];
    for l in 1..=q {
        let layer = lifted.layer(l);
        let row_l1 = (0..layer.out_dim())
            .map(|r| layer.weight.row(r).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let feed = c[l - 1] + if layer.residual { c[l - 2] } else { 0.0 };
        c.push(lip * row_l1 * feed);
    }
    let hat = lifted.layer(q + 1);
    let trace = forward_batch(lifted, data.inputs())?;
    let lin = linearization(lifted.activation(), &trace.pre[q]);
    let row_l1: Vec<f64> = (0..hat.out_dim())
        .map(|r| hat.weight.row(r).iter().map(|x| x.abs()).sum::<f64>() * c[q])
        .collect();
    Ok((0..data.len())
        .map(|i| {
            (0..hat.out_dim())
                .filter(|&j| row_l1[j] > 0.0)
                .map(|j| 0.5 * lin.margins[(i, j)].max(0.0) / row_l1[j])
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanPair {
    pub source_layer: usize,
    pub lifted_layer: usize,
    /// Largest relative residual of projecting `[F', 1]` onto `span[F, 1]`.
    pub lifted_in_source: f64,
    /// The reverse direction.
    pub source_in_lifted: f64,
}

fn augmented(f: &Matrix) -> Matrix {
    Matrix::from_fn(f.rows(), f.cols() + 1, |r, c| {
        if c < f.cols() {
            f[(r, c)]
        } else {
            1.0
        }
    })
}

/// Compares the column spaces of `[F(X), 1]` between corresponding layers of
/// `source` and a network lifted after layer `q`. Every source layer `l` is
/// paired with its copy in the lifted network; the inserted layer is paired
/// with `f^[q]`.
pub fn span_residuals(
    source: &NetworkParams,
    lifted: &NetworkParams,
    data: &Dataset,
    q: usize,
) -> Result<Vec<SpanPair>> {
    if lifted.depth() != source.depth() + 1 || q >= source.depth() {
        return Err(LiftError::ArchitectureMismatch(
            "lifted network must be exactly one layer deeper".into(),
        ));
    }
    let ts = forward_batch(source, data.inputs())?;
    let tl = forward_batch(lifted, data.inputs())?;
    let mut pairs: Vec<(usize, usize)> = (0..=source.depth())
        .map(|l| (l, if l <= q { l } else { l + 1 }))
        .collect();
    pairs.insert(q + 1, (q, q + 1));
    pairs
        .into_iter()
        .map(|(ls, ll)| {
            let a = augmented(&ts.features[ls]);
            let b = augmented(&tl.features[ll]);
            let qa = orthonormal_basis(&a, 1e-12);
            let qb = orthonormal_basis(&b, 1e-12);
            Ok(SpanPair {
                source_layer: ls,
                lifted_layer: ll,
                lifted_in_source: projection_residual(&qa, &b)?,
                source_in_lifted: projection_residual(&qb, &a)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeStep {
    /// Hidden layer (1-based, in the network at the time of the merge) that
    /// was folded into its successor.
    pub layer: usize,
    pub mpc: f64,
    pub widths_before: Vec<usize>,
    pub slope: Vec<f64>,
    pub intercept: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub threshold: f64,
    pub steps: Vec<MergeStep>,
    pub final_widths: Vec<usize>,
}

/// Folds every effectively linear hidden layer into the next one, the most
/// linear first, until no layer's MPC exceeds `threshold`.
pub fn merge_linear_layers(
    params: &NetworkParams,
    data: &Dataset,
    threshold: f64,
) -> Result<(NetworkParams, MergeReport)> {
    if params.has_batch_norm() || params.has_residual() {
        return Err(LiftError::Unsupported(
            "merging needs a plain network without batch-norm or skips".into(),
        ));
    }
    let mut current = params.clone();
    let mut steps = Vec::new();
    loop {
        let report = diagnostics::mpc(&current, data, threshold)?;
        let best = report
            .layers
            .iter()
            .filter(|r| report.flagged.contains(&r.layer))
            .fold(None::<(usize, f64)>, |acc, r| {
                let v = r.mpc.unwrap_or(f64::NEG_INFINITY);
                match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((r.layer, v)),
                }
            });
        let Some((l, value)) = best else { break };
        let trace = forward_batch(&current, data.inputs())?;
        let (pre, post) = (&trace.pre[l - 1], &trace.features[l]);
        let m = pre.cols();
        let mut slope = Vec::with_capacity(m);
        let mut intercept = Vec::with_capacity(m);
        for j in 0..m {
            let (a, b) = lstsq_affine(&pre.column(j), &post.column(j))?;
            slope.push(a);
            intercept.push(b);
        }
        let (first, second) = (current.layer(l), current.layer(l + 1));
        let scaled = first.weight.scale_rows(&slope)?;
        let w_new = matmul(&second.weight, &scaled)?;
        let inner: Vec<f64> = (0..m)
            .map(|j| slope[j] * first.bias[j] + intercept[j])
            .collect();
        let pushed = second.weight.mul_vec(&inner)?;
        let b_new: Vec<f64> = pushed
            .iter()
            .zip(second.bias.iter())
            .map(|(p, b)| p + b)
            .collect();
        steps.push(MergeStep {
            layer: l,
            mpc: value,
            widths_before: current.widths().to_vec(),
            slope,
            intercept,
        });
        let mut layers = current.layers().to_vec();
        layers.splice(l - 1..l + 1, [Layer::new(w_new, Vector::from(b_new))]);
        current = NetworkParams::new(*params.activation(), layers, None)?;
    }
    let final_widths = current.widths().to_vec();
    Ok((
        current,
        MergeReport {
            threshold,
            steps,
            final_widths,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{criticality, mpc_layer};
    use crate::network::{loss, loss_and_grad, predict, Activation, InitConfig, LossKind};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_net(widths: &[usize], act: ActivationSpec, seed: u64) -> NetworkParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = InitConfig {
            variance: 1.0,
            batch_norm_gamma: None,
        };
        NetworkParams::init_gaussian(widths, act, &init, &mut rng).unwrap()
    }

    fn random_data(n: usize, din: usize, dout: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_fn(n, din, |_, _| rng.random_range(-1.0..1.0));
        let y = Matrix::from_fn(n, dout, |_, _| rng.random_range(-1.0..1.0));
        Dataset::new(x, y, LossKind::Mse).unwrap()
    }

    fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn teacher_data(teacher: &NetworkParams, n: usize) -> Dataset {
        let x = Matrix::from_fn(n, teacher.input_dim(), |r, _| {
            -1.0 + 2.0 * r as f64 / (n - 1) as f64
        });
        let y = predict(teacher, &x).unwrap();
        Dataset::new(x, y, LossKind::Mse).unwrap()
    }

    #[test]
    fn already_in_segment_gives_xi_one() {
        // pre-activations of the output lie in [1, 2] exactly at the grid ends
        let p = NetworkParams::new(
            ActivationSpec::relu(),
            vec![
                Layer::new(
                    Matrix::from_rows(&[vec![1.0]]).unwrap(),
                    Vector::from(vec![0.0]),
                ),
                Layer::new(
                    Matrix::from_rows(&[vec![1.0]]).unwrap(),
                    Vector::from(vec![1.0]),
                ),
            ],
            None,
        )
        .unwrap();
        let x = Matrix::from_fn(11, 1, |r, _| r as f64 / 10.0);
        let data = Dataset::new(x.clone(), Matrix::zeros(11, 1), LossKind::Mse).unwrap();
        let rec = one_layer_lift(&p, &data, &LiftPlan::minimal(&p, 1)).unwrap();
        assert_eq!(rec.xi, 1.0);
        assert_eq!(rec.case_taken, CaseTaken::NextNarrower);
        assert!(
            max_abs_diff(
                &predict(&p, &x).unwrap(),
                &predict(&rec.result, &x).unwrap()
            ) <= 1e-12
        );
    }

    #[test]
    fn both_cases_preserve_outputs_and_loss() {
        let cases = [
            (vec![3, 5, 2], 1, CaseTaken::NextNarrower),
            (vec![3, 2, 5], 1, CaseTaken::PrevNarrower),
            (vec![2, 4, 4, 1], 0, CaseTaken::PrevNarrower),
            (vec![2, 4, 4, 1], 2, CaseTaken::NextNarrower),
            (vec![2, 3, 3, 2], 1, CaseTaken::NextNarrower),
        ];
        for (seed, (widths, q, case)) in cases.into_iter().enumerate() {
            for act in [
                ActivationSpec::relu(),
                ActivationSpec::new(Activation::LeakyRelu { alpha: 0.1 }),
                ActivationSpec::new(Activation::Elu { alpha: 1.0 }),
            ] {
                let p = random_net(&widths, act, seed as u64);
                let data = random_data(25, widths[0], *widths.last().unwrap(), seed as u64);
                let plan = LiftPlan::minimal(&p, q);
                let rec = one_layer_lift(&p, &data, &plan).unwrap();
                assert_eq!(rec.case_taken, case, "{widths:?} q={q}");
                let d = max_abs_diff(
                    &predict(&p, data.inputs()).unwrap(),
                    &predict(&rec.result, data.inputs()).unwrap(),
                );
                assert!(d <= 1e-9, "{widths:?} {act:?}: {d}");
                let (r0, r1) = (loss(&p, &data).unwrap(), loss(&rec.result, &data).unwrap());
                assert!((r0 - r1).abs() <= 1e-10 * r0.max(1.0));
                let report = verify_membership(&p, &rec.result, &data, &rec.plan).unwrap();
                assert!(report.overall, "{report:?}");
                assert!(rec.margins.iter().all(|&m| m > 0.0));
                assert!(rec.lambda.iter().all(|&l| l != 0.0));
            }
        }
    }

    #[test]
    fn padded_width_and_explicit_sides() {
        let p = random_net(&[2, 4, 3, 1], ActivationSpec::relu(), 7);
        let data = random_data(20, 2, 1, 8);
        for side in [FactorSide::MatchNext, FactorSide::MatchPrev] {
            let plan = LiftPlan::new(1, 7).with_side(side).with_interval(0.5, 3.0);
            let rec = one_layer_lift(&p, &data, &plan).unwrap();
            assert_eq!(rec.result.widths(), &[2, 4, 7, 3, 1]);
            assert!(
                verify_membership(&p, &rec.result, &data, &rec.plan)
                    .unwrap()
                    .overall
            );
            let d = max_abs_diff(
                &predict(&p, data.inputs()).unwrap(),
                &predict(&rec.result, data.inputs()).unwrap(),
            );
            assert!(d <= 1e-9);
        }
    }

    #[test]
    fn degenerate_constant_maps_to_midpoint() {
        let mut layers = random_net(&[2, 3, 1], ActivationSpec::relu(), 3).into_layers();
        layers[1].weight = Matrix::zeros(1, 3);
        let p = NetworkParams::new(ActivationSpec::relu(), layers, None).unwrap();
        let data = random_data(10, 2, 1, 3);
        let rec = one_layer_lift(&p, &data, &LiftPlan::minimal(&p, 1)).unwrap();
        assert_eq!(rec.case_taken, CaseTaken::DegenerateConstant);
        assert_eq!(rec.xi, 1.0);
        let trace = forward_batch(&rec.result, data.inputs()).unwrap();
        assert!(trace.pre[1]
            .as_slice()
            .iter()
            .all(|&v| (v - 1.5).abs() < 1e-12));
        assert!(
            verify_membership(&p, &rec.result, &data, &rec.plan)
                .unwrap()
                .overall
        );
    }

    #[test]
    fn plan_validation() {
        let p = random_net(&[2, 4, 3], ActivationSpec::relu(), 1);
        let data = random_data(5, 2, 3, 1);
        let bad = [
            LiftPlan::new(2, 3),
            LiftPlan::new(1, 2),
            LiftPlan::minimal(&p, 0).with_interval(2.0, 2.0),
            LiftPlan::minimal(&p, 0).with_interval(-1.0, 1.0),
            LiftPlan::new(1, 3).with_side(FactorSide::MatchPrev),
            LiftPlan {
                residual: true,
                ..LiftPlan::new(1, 3)
            },
        ];
        for plan in bad {
            assert!(
                matches!(
                    one_layer_lift(&p, &data, &plan),
                    Err(LiftError::InvalidPlan(_))
                ),
                "{plan:?}"
            );
        }
        let json = r#"{"insert_after":1,"inserted_width":3}"#;
        let plan: LiftPlan = serde_json::from_str(json).unwrap();
        assert_eq!(plan, LiftPlan::new(1, 3));
    }

    #[test]
    fn leaky_relu_uses_negative_branch() {
        let act = ActivationSpec::new(Activation::LeakyRelu { alpha: 0.2 });
        let p = random_net(&[2, 3, 2], act, 4);
        let data = random_data(12, 2, 2, 4);
        let rec = one_layer_lift(&p, &data, &LiftPlan::minimal(&p, 1)).unwrap();
        assert!(rec.lambda.iter().all(|&l| l == 0.2));
        let pos =
            one_layer_lift(&p, &data, &LiftPlan::minimal(&p, 1).with_interval(1.0, 2.0)).unwrap();
        assert!(pos.lambda.iter().all(|&l| l == 1.0));
        assert!(
            verify_membership(&p, &pos.result, &data, &pos.plan)
                .unwrap()
                .overall
        );
    }

    #[test]
    fn verifier_catches_violations() {
        let p = random_net(&[2, 4, 2], ActivationSpec::relu(), 5);
        let data = random_data(15, 2, 2, 5);
        let rec = one_layer_lift(&p, &data, &LiftPlan::minimal(&p, 1)).unwrap();

        let mut layers = rec.result.clone().into_layers();
        layers[1].bias[0] -= 5.0;
        let pushed_out = NetworkParams::new(*p.activation(), layers, None).unwrap();
        let r = verify_membership(&p, &pushed_out, &data, &rec.plan).unwrap();
        assert!(!r.linearization_ok && !r.overall);
        assert!(r.violations.iter().all(|v| v.neuron == 0));
        assert!(r.min_margin < 0.0);

        let mut layers = rec.result.clone().into_layers();
        layers[0].weight.as_mut_slice()[0] += 1e-3;
        let touched = NetworkParams::new(*p.activation(), layers, None).unwrap();
        let r = verify_membership(&p, &touched, &data, &rec.plan).unwrap();
        assert!(!r.local_in_layer_ok && r.changed_layers == vec![1]);

        let mut layers = rec.result.clone().into_layers();
        layers[2].bias[1] += 1e-3;
        let off = NetworkParams::new(*p.activation(), layers, None).unwrap();
        assert!(
            !verify_membership(&p, &off, &data, &rec.plan)
                .unwrap()
                .output_preserving_ok
        );

        assert!(matches!(
            verify_membership(&p, &p, &data, &rec.plan),
            Err(LiftError::ArchitectureMismatch(_))
        ));
    }

    #[test]
    fn criticality_is_preserved_at_a_teacher_minimum() {
        let teacher = random_net(&[1, 3, 1], ActivationSpec::relu(), 11);
        let data = teacher_data(&teacher, 30);
        assert_eq!(criticality(&teacher, &data, 1e-4).unwrap().grad_l1, 0.0);
        let rec = one_layer_lift(&teacher, &data, &LiftPlan::minimal(&teacher, 1)).unwrap();
        let (r, g) = loss_and_grad(&rec.result, &data).unwrap();
        assert!(r <= 1e-20, "{r}");
        assert!(g.l1_norm() <= 1e-9, "{}", g.l1_norm());
    }

    #[test]
    fn backward_identities_through_inserted_layer() {
        let p = random_net(&[2, 4, 3, 2], ActivationSpec::relu(), 13);
        let data = random_data(17, 2, 2, 13);
        let rec = one_layer_lift(&p, &data, &LiftPlan::minimal(&p, 1)).unwrap();
        let lifted = &rec.result;
        let trace = forward_batch(lifted, data.inputs()).unwrap();
        let g = crate::network::backprop(lifted, &trace, data.targets(), LossKind::Mse).unwrap();
        // inserted layer is layer 2 of the lifted net
        let g_hat = &g.g[1];
        for i in 0..data.len() {
            for (j, &v) in g_hat.row(i).iter().enumerate() {
                assert_eq!(v, rec.lambda[j]);
            }
        }
        let w_next = &lifted.layer(3).weight;
        for i in 0..data.len() {
            let zg: Vec<f64> = g.z[2]
                .row(i)
                .iter()
                .zip(g.g[2].row(i))
                .map(|(a, b)| a * b)
                .collect();
            let expect = w_next.tr_mul_vec(&zg).unwrap();
            for (a, b) in g.z[1].row(i).iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn multi_layer_lift_composes() {
        let p = random_net(&[1, 3, 1], ActivationSpec::relu(), 21);
        let data = teacher_data(&p, 25);
        let (same, recs) = multi_layer_lift(&p, &data, &[]).unwrap();
        assert_eq!(same, p);
        assert!(recs.is_empty());
        let plans = [LiftPlan::new(1, 1), LiftPlan::new(1, 1)];
        let (deep, recs) = multi_layer_lift(&p, &data, &plans).unwrap();
        assert_eq!(deep.widths(), &[1, 3, 1, 1, 1]);
        assert_eq!(recs.len(), 2);
        let d = max_abs_diff(
            &predict(&p, data.inputs()).unwrap(),
            &predict(&deep, data.inputs()).unwrap(),
        );
        assert!(d <= 1e-9);
        assert!(loss_and_grad(&deep, &data).unwrap().1.l1_norm() <= 1e-8);
        let bad = [LiftPlan::new(1, 1), LiftPlan::new(9, 1)];
        assert!(matches!(
            multi_layer_lift(&p, &data, &bad),
            Err(LiftError::Step { index: 1, .. })
        ));
    }

    #[test]
    fn residual_lift_satisfies_modified_condition() {
        let p = random_net(&[2, 3, 3, 1], ActivationSpec::relu(), 31);
        let data = random_data(20, 2, 1, 31);
        for q in [0, 1] {
            let plan = LiftPlan::residual(&p, q);
            let rec = residual_lift(&p, &data, &plan).unwrap();
            assert!(rec.result.layer(q + 2).residual);
            let report = verify_membership(&p, &rec.result, &data, &rec.plan).unwrap();
            assert!(report.overall && report.weight_residual <= report.weight_tol);
            let (r0, r1) = (loss(&p, &data).unwrap(), loss(&rec.result, &data).unwrap());
            assert!((r0 - r1).abs() <= 1e-10 * r0.max(1.0));
        }
        assert!(residual_lift(&p, &data, &LiftPlan::minimal(&p, 1)).is_err());
    }

    #[test]
    fn zero_block_candidate() {
        let p = random_net(&[2, 3, 1], ActivationSpec::relu(), 41);
        let data = random_data(10, 2, 1, 41);
        let (inside, plan) = zero_block_residual(&p, 1, 1.5).unwrap();
        let r = verify_membership(&p, &inside, &data, &plan).unwrap();
        assert!(r.overall, "{r:?}");
        let d = max_abs_diff(
            &predict(&p, data.inputs()).unwrap(),
            &predict(&inside, data.inputs()).unwrap(),
        );
        assert!(d <= 1e-12);
        let (kink, plan) = zero_block_residual(&p, 1, 0.0).unwrap();
        let r = verify_membership(&p, &kink, &data, &plan).unwrap();
        assert!(!r.linearization_ok && !r.overall);
    }

    #[test]
    fn membership_holds_on_every_subset() {
        let p = random_net(&[1, 4, 1], ActivationSpec::relu(), 51);
        let x = Matrix::from_fn(100, 1, |r, _| -1.0 + 2.0 * r as f64 / 99.0);
        let data = Dataset::new(x.clone(), Matrix::zeros(100, 1), LossKind::Mse).unwrap();
        let rec = one_layer_lift(&p, &data, &LiftPlan::minimal(&p, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut idx: Vec<usize> = (0..100).collect();
        for _ in 0..50 {
            idx.shuffle(&mut rng);
            let k = rng.random_range(1..=100);
            let sub = data.subset(&idx[..k]).unwrap();
            assert!(
                verify_membership(&p, &rec.result, &sub, &rec.plan)
                    .unwrap()
                    .overall
            );
        }
    }

    #[test]
    fn outputs_agree_in_a_neighbourhood() {
        for (q, widths) in [
            (0usize, vec![2, 3, 2]),
            (1, vec![2, 3, 2]),
            (2, vec![2, 4, 3, 1]),
        ] {
            let p = random_net(&widths, ActivationSpec::relu(), 61 + q as u64);
            let data = random_data(12, 2, *widths.last().unwrap(), 61);
            let rec = one_layer_lift(&p, &data, &LiftPlan::minimal(&p, q)).unwrap();
            let radii = neighborhood_radii(&rec.result, &data, q).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(q as u64);
            for (i, &r) in radii.iter().enumerate() {
                assert!(r > 0.0);
                for _ in 0..10 {
                    let x: Vec<f64> = data
                        .inputs()
                        .row(i)
                        .iter()
                        .map(|v| v + rng.random_range(-r..=r))
                        .collect();
                    let a = crate::network::forward(&p, &x).unwrap();
                    let b = crate::network::forward(&rec.result, &x).unwrap();
                    for (u, v) in a.iter().zip(&b) {
                        assert!((u - v).abs() <= 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn spans_match_when_factoring_through_prev() {
        let p = random_net(&[3, 2, 4], ActivationSpec::relu(), 71);
        let data = random_data(30, 3, 4, 71);
        let rec = one_layer_lift(&p, &data, &LiftPlan::minimal(&p, 1)).unwrap();
        assert_eq!(rec.case_taken, CaseTaken::PrevNarrower);
        for pair in span_residuals(&p, &rec.result, &data, 1).unwrap() {
            assert!(
                pair.lifted_in_source <= 1e-8 && pair.source_in_lifted <= 1e-8,
                "{pair:?}"
            );
        }
    }

    #[test]
    fn strict_next_case_only_gives_inclusion() {
        let p = random_net(&[3, 4, 2], ActivationSpec::relu(), 72);
        let data = random_data(30, 3, 2, 72);
        let rec = one_layer_lift(&p, &data, &LiftPlan::minimal(&p, 1)).unwrap();
        assert_eq!(rec.case_taken, CaseTaken::NextNarrower);
        let pairs = span_residuals(&p, &rec.result, &data, 1).unwrap();
        let inserted = pairs
            .iter()
            .find(|s| s.lifted_layer == 2 && s.source_layer == 1)
            .unwrap();
        assert!(inserted.lifted_in_source <= 1e-8);
        assert!(inserted.source_in_lifted > 1e-3);
    }

    #[test]
    fn merge_undoes_a_lift() {
        let p = random_net(&[2, 5, 3], ActivationSpec::tanh(), 81);
        let data = random_data(40, 2, 3, 81);
        let relu = random_net(&[2, 5, 3], ActivationSpec::relu(), 81);
        for net in [p, relu] {
            let before = diagnostics::mpc(&net, &data, 0.99).unwrap();
            let rec = one_layer_lift(&net, &data, &LiftPlan::minimal(&net, 1)).unwrap();
            assert!((mpc_layer(&rec.result, &data, 2).unwrap().mpc.unwrap() - 1.0).abs() < 1e-9);
            let (merged, report) = merge_linear_layers(&rec.result, &data, 0.99).unwrap();
            assert_eq!(report.steps[0].layer, 2);
            if before.flagged.is_empty() {
                assert_eq!(merged.widths(), net.widths());
                let d = max_abs_diff(
                    &predict(&net, data.inputs()).unwrap(),
                    &predict(&merged, data.inputs()).unwrap(),
                );
                let tol = if net.activation().approx { 1e-4 } else { 1e-8 };
                assert!(d <= tol, "{d}");
            }
        }
    }

    #[test]
    fn merge_leaves_nonlinear_networks_alone() {
        let p = random_net(&[1, 6, 1], ActivationSpec::relu(), 91);
        let x = Matrix::from_fn(20, 1, |r, _| -1.0 + r as f64 / 10.0);
        let data = Dataset::new(x, Matrix::zeros(20, 1), LossKind::Mse).unwrap();
        let (out, report) = merge_linear_layers(&p, &data, 1.1).unwrap();
        assert_eq!(out, p);
        assert!(report.steps.is_empty());
    }
}
