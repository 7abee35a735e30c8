use super::{loss_and_grad, Dataset, NetworkError, NetworkParams, Result};
use crate::linalg::Matrix;

/// Largest parameter count accepted by [`hessian_fd`] unless overridden.
pub const DEFAULT_HESSIAN_CAP: usize = 3000;

#[derive(Clone, Debug)]
pub struct HessianFd {
    /// Symmetrised Hessian `(H + Hᵀ)/2` in flat parameter order.
    pub matrix: Matrix,
    /// `‖H − Hᵀ‖_F / ‖H‖_F` before symmetrisation (0 for a zero matrix).
    pub asymmetry_rel: f64,
}

/// Hessian of the empirical risk from central differences of the analytic
/// gradient, with step `h_j = 1e-4 · max(1, |θ_j|)`.
pub fn hessian_fd(params: &NetworkParams, data: &Dataset, cap: usize) -> Result<HessianFd> {
    if data.is_empty() {
        return Err(NetworkError::EmptyDataset);
    }
    let p = params.param_count();
    if p > cap {
        return Err(NetworkError::TooManyParameters { count: p, cap });
    }
    let theta = params.flatten();
    let mut h = Matrix::zeros(p, p);
    let mut probe = theta.clone();
    for j in 0..p {
        let step = 1e-4 * theta[j].abs().max(1.0);
        probe[j] = theta[j] + step;
        let gp = loss_and_grad(&params.with_flat(&probe)?, data)?.1.flatten();
        probe[j] = theta[j] - step;
        let gm = loss_and_grad(&params.with_flat(&probe)?, data)?.1.flatten();
        probe[j] = theta[j];
        // column j holds ∂g/∂θ_j
        for i in 0..p {
            h[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    let ht = h.transpose();
    let norm = h.frobenius();
    let asymmetry_rel = if norm > 0.0 {
        h.sub(&ht)?.frobenius() / norm
    } else {
        0.0
    };
    let mut sym = h.add(&ht)?;
    sym.as_mut_slice().iter_mut().for_each(|x| *x *= 0.5);
    Ok(HessianFd {
        matrix: sym,
        asymmetry_rel,
    })
}
