use super::dataset::Dataset;
use super::{LossKind, NetworkError, NetworkParams, Result, BN_EPS};
use crate::linalg::{matmul, matmul_at, matmul_bt, Matrix, Vector};

/// Batch-norm quantities cached for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub xhat: Matrix,
    pub sigma: Vec<f64>,
}

/// Every intermediate of a batched forward pass; row `i` of each matrix
/// belongs to sample `i`.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `features[l]` is `f^[l]` for `l = 0..=L`; `features[L]` is the output.
    pub features: Vec<Matrix>,
    /// `pre[l - 1]` is the value fed into `σ` at layer `l` (after batch-norm
    /// when enabled). For the output layer it equals the output.
    pub pre: Vec<Matrix>,
    pub bn: Vec<Option<BnCache>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        self.features.last().unwrap()
    }

    /// `f^[l]`, `l = 0..=L`.
    pub fn feature(&self, l: usize) -> &Matrix {
        &self.features[l]
    }

    pub fn samples(&self) -> usize {
        self.features[0].rows()
    }
}

fn add_bias(m: &mut Matrix, b: &[f64]) {
    for r in 0..m.rows() {
        for (x, bi) in m.row_mut(r).iter_mut().zip(b) {
            *x += bi;
        }
    }
}

fn column_means(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, x) in out.iter_mut().zip(m.row(r)) {
            *o += x;
        }
    }
    let n = m.rows() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Input to layer `l` (1-based): `f^[l-1]`, plus `f^[l-2]` for residual layers.
fn layer_input(params: &NetworkParams, features: &[Matrix], l: usize) -> Matrix {
    let prev = &features[l - 1];
    if params.layer(l).residual {
        prev.add(&features[l - 2])
            .expect("validated residual widths")
    } else {
        prev.clone()
    }
}

/// Batched forward pass over the rows of `inputs`.
pub fn forward_batch(params: &NetworkParams, inputs: &Matrix) -> Result<ForwardTrace> {
    if inputs.rows() == 0 {
        return Err(NetworkError::EmptyDataset);
    }
    if inputs.cols() != params.input_dim() {
        return Err(NetworkError::Shape(format!(
            "inputs have {} columns, network expects {}",
            inputs.cols(),
            params.input_dim()
        )));
    }
    if params.has_batch_norm() && inputs.rows() < 2 {
        return Err(NetworkError::BatchTooSmall(inputs.rows()));
    }
    let depth = params.depth();
    let act = params.activation();
    let mut features = Vec::with_capacity(depth + 1);
    let mut pre = Vec::with_capacity(depth);
    let mut bn_caches = Vec::with_capacity(depth);
    features.push(inputs.clone());
    for l in 1..=depth {
        let layer = params.layer(l);
        let input = layer_input(params, &features, l);
        let mut z = matmul_bt(&input, &layer.weight)?;
        add_bias(&mut z, &layer.bias);
        if l == depth {
            pre.push(z.clone());
            features.push(z);
            bn_caches.push(None);
            break;
        }
        let cache = match params.bn_at(l) {
            Some(bn) => {
                let n = z.rows() as f64;
                let mu = column_means(&z);
                let mut var = vec![0.0; z.cols()];
                for r in 0..z.rows() {
                    for (j, x) in z.row(r).iter().enumerate() {
                        var[j] += (x - mu[j]) * (x - mu[j]);
                    }
                }
                let sigma: Vec<f64> = var.iter().map(|v| (v / n + BN_EPS).sqrt()).collect();
                let mut xhat = z.clone();
                for r in 0..xhat.rows() {
                    let row = xhat.row_mut(r);
                    for j in 0..row.len() {
                        row[j] = (row[j] - mu[j]) / sigma[j];
                    }
                }
                for r in 0..z.rows() {
                    let (xr, zr) = (xhat.row(r), z.row_mut(r));
                    for j in 0..zr.len() {
                        zr[j] = bn.gamma[j] * xr[j] + bn.beta[j];
                    }
                }
                Some(BnCache { xhat, sigma })
            }
            None => None,
        };
        let mut f = z.clone();
        f.as_mut_slice().iter_mut().for_each(|x| *x = act.eval(*x));
        pre.push(z);
        features.push(f);
        bn_caches.push(cache);
    }
    Ok(ForwardTrace {
        features,
        pre,
        bn: bn_caches,
    })
}

/// Output for a single input. Batch-norm networks need a batch.
pub fn forward(params: &NetworkParams, x: &[f64]) -> Result<Vec<f64>> {
    if params.has_batch_norm() {
        return Err(NetworkError::BatchTooSmall(1));
    }
    let m = Matrix::new(1, x.len(), x.to_vec())?;
    Ok(forward_batch(params, &m)?.output().row(0).to_vec())
}

/// Batched outputs.
pub fn predict(params: &NetworkParams, inputs: &Matrix) -> Result<Matrix> {
    Ok(forward_batch(params, inputs)?.features.pop().unwrap())
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

fn sample_loss(kind: LossKind, out: &[f64], y: &[f64]) -> f64 {
    match kind {
        LossKind::Mse => out.iter().zip(y).map(|(f, t)| (f - t) * (f - t)).sum(),
        LossKind::CrossEntropy => -log_softmax(out)
            .iter()
            .zip(y)
            .map(|(l, t)| t * l)
            .sum::<f64>(),
    }
}

/// Per-sample `∂ℓ/∂f^[L]`.
fn sample_loss_grad(kind: LossKind, out: &[f64], y: &[f64]) -> Vec<f64> {
    match kind {
        LossKind::Mse => out.iter().zip(y).map(|(f, t)| 2.0 * (f - t)).collect(),
        LossKind::CrossEntropy => {
            let total: f64 = y.iter().sum();
            log_softmax(out)
                .iter()
                .zip(y)
                .map(|(l, t)| l.exp() * total - t)
                .collect()
        }
    }
}

fn check_targets(out: &Matrix, targets: &Matrix) -> Result<()> {
    if out.shape() != targets.shape() {
        return Err(NetworkError::Shape(format!(
            "outputs are {}x{} but targets are {}x{}",
            out.rows(),
            out.cols(),
            targets.rows(),
            targets.cols()
        )));
    }
    Ok(())
}

fn empirical_risk(kind: LossKind, out: &Matrix, targets: &Matrix) -> f64 {
    let total: f64 = (0..out.rows())
        .map(|i| sample_loss(kind, out.row(i), targets.row(i)))
        .sum();
    total / out.rows() as f64
}

/// Empirical risk of precomputed outputs.
pub fn risk(kind: LossKind, outputs: &Matrix, targets: &Matrix) -> Result<f64> {
    check_targets(outputs, targets)?;
    Ok(empirical_risk(kind, outputs, targets))
}

/// Empirical risk `R(θ) = (1/n) Σ ℓ(f(x_i), y_i)`.
pub fn loss(params: &NetworkParams, data: &Dataset) -> Result<f64> {
    let trace = forward_batch(params, data.inputs())?;
    check_targets(trace.output(), data.targets())?;
    Ok(empirical_risk(
        data.loss_kind(),
        trace.output(),
        data.targets(),
    ))
}

/// Gradient of the empirical risk together with the per-sample backward
/// quantities.
#[derive(Clone, Debug)]
pub struct GradientBundle {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
    /// `∂R/∂γ` and `∂R/∂β` for each enabled batch-norm layer, in layer order.
    pub gamma: Vec<Vector>,
    pub beta: Vec<Vector>,
    /// `z[l - 1]` holds `∂ℓ_i/∂f^[l]` per sample (row `i`).
    pub z: Vec<Matrix>,
    /// `g[l - 1]` holds `σ'` at the pre-activations of layer `l`; all ones
    /// for the output layer.
    pub g: Vec<Matrix>,
}

impl GradientBundle {
    /// Same order as [`NetworkParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        for (g, b) in self.gamma.iter().zip(&self.beta) {
            out.extend_from_slice(g);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn l1_norm(&self) -> f64 {
        self.flatten().iter().map(|x| x.abs()).sum()
    }
}

/// Backpropagation through a recorded forward pass.
pub fn backprop(
    params: &NetworkParams,
    trace: &ForwardTrace,
    targets: &Matrix,
    kind: LossKind,
) -> Result<GradientBundle> {
    let out = trace.output();
    check_targets(out, targets)?;
    let n = out.rows();
    let inv_n = 1.0 / n as f64;
    let depth = params.depth();
    let act = params.activation();

    // dfeat[l] accumulates ∂ℓ_i/∂f^[l] row by row.
    let mut dfeat: Vec<Option<Matrix>> = vec![None; depth + 1];
    let mut top = Matrix::zeros(n, out.cols());
    for i in 0..n {
        top.row_mut(i)
            .copy_from_slice(&sample_loss_grad(kind, out.row(i), targets.row(i)));
    }
    dfeat[depth] = Some(top);

    let mut weights = vec![Matrix::zeros(0, 0); depth];
    let mut biases = vec![Vector::zeros(0); depth];
    let mut z_all = vec![Matrix::zeros(0, 0); depth];
    let mut g_all = vec![Matrix::zeros(0, 0); depth];
    let mut gammas = Vec::new();
    let mut betas = Vec::new();

    for l in (1..=depth).rev() {
        let d = dfeat[l].take().expect("downstream gradient present");
        let g = if l == depth {
            let mut ones = Matrix::zeros(n, d.cols());
            ones.as_mut_slice().fill(1.0);
            ones
        } else {
            let mut g = trace.pre[l - 1].clone();
            g.as_mut_slice()
                .iter_mut()
                .for_each(|x| *x = act.derivative(*x));
            g
        };
        // ∂ℓ/∂(σ input)
        let mut delta = d.clone();
        for (x, gv) in delta.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *x *= gv;
        }
        if let (Some(bn), Some(cache)) = (params.bn_at(l).filter(|_| l < depth), &trace.bn[l - 1]) {
            let m = delta.cols();
            let mut mean_d = vec![0.0; m];
            let mut mean_dx = vec![0.0; m];
            for r in 0..n {
                let (dr, xr) = (delta.row(r), cache.xhat.row(r));
                for j in 0..m {
                    mean_d[j] += dr[j];
                    mean_dx[j] += dr[j] * xr[j];
                }
            }
            mean_d.iter_mut().for_each(|x| *x *= inv_n);
            mean_dx.iter_mut().for_each(|x| *x *= inv_n);
            for r in 0..n {
                let xr = cache.xhat.row(r).to_vec();
                let dr = delta.row_mut(r);
                for j in 0..m {
                    dr[j] = bn.gamma[j] / cache.sigma[j] * (dr[j] - mean_d[j] - xr[j] * mean_dx[j]);
                }
            }
            gammas.push(Vector::from(mean_dx));
            betas.push(Vector::from(mean_d));
        }
        let input = layer_input(params, &trace.features, l);
        let mut gw = matmul_at(&delta, &input)?;
        gw.as_mut_slice().iter_mut().for_each(|x| *x *= inv_n);
        weights[l - 1] = gw;
        biases[l - 1] = Vector::from(column_means(&delta));

        if l > 1 {
            let back = matmul(&delta, &params.layer(l).weight)?;
            accumulate(&mut dfeat[l - 1], &back);
            if params.layer(l).residual {
                accumulate(&mut dfeat[l - 2], &back);
            }
        }
        z_all[l - 1] = d;
        g_all[l - 1] = g;
    }
    gammas.reverse();
    betas.reverse();
    Ok(GradientBundle {
        weights,
        biases,
        gamma: gammas,
        beta: betas,
        z: z_all,
        g: g_all,
    })
}

fn accumulate(slot: &mut Option<Matrix>, m: &Matrix) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *a += b;
            }
        }
        None => *slot = Some(m.clone()),
    }
}

/// Risk and its gradient in flat parameter order.
pub fn loss_and_grad(params: &NetworkParams, data: &Dataset) -> Result<(f64, GradientBundle)> {
    let trace = forward_batch(params, data.inputs())?;
    let grads = backprop(params, &trace, data.targets(), data.loss_kind())?;
    Ok((
        empirical_risk(data.loss_kind(), trace.output(), data.targets()),
        grads,
    ))
}
