//! Dense small-matrix numerics.
//!
//! Everything here is written for the matrix sizes that show up when
//! analysing desk-scale networks: weight matrices of a few hundred rows and
//! Hessians of at most a few thousand parameters. Storage is row-major `f64`.

use std::fmt;
use std::ops::{Deref, DerefMut, Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    DimensionMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("non-finite entry at position {index}")]
    NonFinite { index: usize },
    #[error("entries length {len} does not match shape {rows}x{cols}")]
    BadLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("{op} needs at least {min} samples, got {got}")]
    TooShort {
        op: &'static str,
        min: usize,
        got: usize,
    },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error(
        "Jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off:e})"
    )]
    NoConvergence { sweeps: usize, off: f64 },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

impl LinalgError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, LinalgError::NoConvergence { .. })
    }
}

/// A dense vector of finite reals.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        check_finite(&entries)?;
        Ok(Vector(entries))
    }

    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Vector(vec![value; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn l1_norm(&self) -> f64 {
        self.0.iter().map(|x| x.abs()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl From<Vec<f64>> for Vector {
    /// Unchecked conversion; use [`Vector::new`] for untrusted input.
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Checked constructor: shape must match and every entry must be finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Matrix { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Matrix::zeros(d.len(), d.len());
        for (i, &x) in d.iter().enumerate() {
            m[(i, i)] = x;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix::from_raw(rows, cols, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            if r.len() != m {
                return Err(LinalgError::DimensionMismatch {
                    op: "from_rows",
                    lhs: format!("row length {m}"),
                    rhs: format!("row length {}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Matrix::new(n, m, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|x| x * s).collect(),
        )
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(shape_err(op, self, other));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    /// Scales row `r` by `d[r]`, i.e. `diag(d) * self`.
    pub fn scale_rows(&self, d: &[f64]) -> Result<Matrix> {
        if d.len() != self.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "scale_rows",
                lhs: format!("{}x{}", self.rows, self.cols),
                rhs: format!("diag of length {}", d.len()),
            });
        }
        Ok(Matrix::from_fn(self.rows, self.cols, |r, c| {
            d[r] * self[(r, c)]
        }))
    }

    /// Scales column `c` by `d[c]`, i.e. `self * diag(d)`.
    pub fn scale_cols(&self, d: &[f64]) -> Result<Matrix> {
        if d.len() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                op: "scale_cols",
                lhs: format!("{}x{}", self.rows, self.cols),
                rhs: format!("diag of length {}", d.len()),
            });
        }
        Ok(Matrix::from_fn(self.rows, self.cols, |r, c| {
            self[(r, c)] * d[c]
        }))
    }

    /// `self * v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                op: "mul_vec",
                lhs: format!("{}x{}", self.rows, self.cols),
                rhs: format!("vector of length {}", v.len()),
            });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// `selfᵀ * v`.
    pub fn tr_mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "tr_mul_vec",
                lhs: format!("{}x{} transposed", self.rows, self.cols),
                rhs: format!("vector of length {}", v.len()),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * vr;
            }
        }
        Ok(out)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> LinalgError {
    LinalgError::DimensionMismatch {
        op,
        lhs: format!("{}x{}", a.rows, a.cols),
        rhs: format!("{}x{}", b.rows, b.cols),
    }
}

fn check_finite(xs: &[f64]) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(LinalgError::NonFinite { index }),
        None => Ok(()),
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Matrix product `a * b`.
///
/// Every output entry is accumulated over the shared index in ascending
/// order, so results are reproducible bit for bit.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape_err("matmul", a, b));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a * bᵀ` without materialising the transpose.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(shape_err("matmul_bt", a, b));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(arow, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ * b` without materialising the transpose. Sums over rows of `a` and
/// `b` in ascending row order.
pub fn matmul_at(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(shape_err("matmul_at", a, b));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let brow = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

/// Result of a Pearson correlation. When either input has zero variance the
/// coefficient is undefined; `rho` is then the sentinel `0.0` and `constant`
/// is set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    pub constant: bool,
}

/// Sample Pearson correlation of `u` and `v`, computed with a two-pass
/// centred formula.
pub fn pearson(u: &[f64], v: &[f64]) -> Result<Correlation> {
    if u.len() != v.len() {
        return Err(LinalgError::DimensionMismatch {
            op: "pearson",
            lhs: format!("length {}", u.len()),
            rhs: format!("length {}", v.len()),
        });
    }
    let n = u.len();
    if n < 2 {
        return Err(LinalgError::TooShort {
            op: "pearson",
            min: 2,
            got: n,
        });
    }
    let mu = mean(u);
    let mv = mean(v);
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (&a, &b) in u.iter().zip(v) {
        let da = a - mu;
        let db = b - mv;
        suv += da * db;
        suu += da * da;
        svv += db * db;
    }
    if is_degenerate(suu, u) || is_degenerate(svv, v) {
        return Ok(Correlation {
            rho: 0.0,
            constant: true,
        });
    }
    let rho = (suv / (suu.sqrt() * svv.sqrt())).clamp(-1.0, 1.0);
    Ok(Correlation {
        rho,
        constant: false,
    })
}

// A column counts as constant when its spread is at rounding level relative
// to its magnitude.
fn is_degenerate(sum_sq_dev: f64, xs: &[f64]) -> bool {
    let scale = xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let std = (sum_sq_dev / xs.len() as f64).sqrt();
    std <= 1e-13 * scale.max(f64::MIN_POSITIVE) || sum_sq_dev == 0.0
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Ordinary least-squares fit `y ≈ slope * x + intercept`.
///
/// When `x` has zero variance the slope is defined as 0 and the intercept is
/// the mean of `y`.
pub fn lstsq_affine(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(LinalgError::DimensionMismatch {
            op: "lstsq_affine",
            lhs: format!("length {}", x.len()),
            rhs: format!("length {}", y.len()),
        });
    }
    if x.len() < 2 {
        return Err(LinalgError::TooShort {
            op: "lstsq_affine",
            min: 2,
            got: x.len(),
        });
    }
    let mx = mean(x);
    let my = mean(y);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    if is_degenerate(sxx, x) {
        return Ok((0.0, my));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEig {
    /// Eigenvalues in ascending order.
    pub values: Vector,
    /// Column `k` is the unit eigenvector of `values[k]`.
    pub vectors: Matrix,
    /// `‖H − Hᵀ‖_F` of the input before symmetrisation.
    pub asymmetry: f64,
    pub sweeps: usize,
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Symmetric eigensolver based on cyclic Jacobi rotations.
///
/// The input is symmetrised as `(H + Hᵀ)/2` first. Asymmetry larger than
/// `1e-6 ‖H‖_F` is logged as a warning but is not an error.
pub fn sym_eig(h: &Matrix) -> Result<SymEig> {
    let n = h.rows;
    if h.cols != n {
        return Err(LinalgError::NotSquare {
            rows: h.rows,
            cols: h.cols,
        });
    }
    let asymmetry = h.sub(&h.transpose())?.frobenius();
    let norm = h.frobenius();
    if asymmetry > 1e-6 * norm {
        log::warn!(
            "sym_eig: asymmetry {asymmetry:e} exceeds 1e-6·‖H‖_F = {:e}; symmetrising",
            1e-6 * norm
        );
    }
    let mut a = Matrix::from_fn(n, n, |r, c| 0.5 * (h[(r, c)] + h[(c, r)]));
    let mut v = Matrix::identity(n);
    let scale = a.frobenius();
    let tol = f64::EPSILON * scale.max(f64::MIN_POSITIVE);

    let mut sweeps = 0;
    loop {
        let off = off_diagonal_norm(&a);
        if off <= tol || n < 2 {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NoConvergence { sweeps, off });
        }
        sweeps += 1;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                // Skip rotations that cannot change the diagonal at working precision.
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                if sweeps > 3 && apq.abs() < 1e-3 * f64::EPSILON * (app.abs().min(aqq.abs())) {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + theta.hypot(1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s, t);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEig {
        values: Vector(values),
        vectors,
        asymmetry,
        sweeps,
    })
}

fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64, t: f64) {
    let n = a.rows;
    let apq = a[(p, q)];
    a[(p, p)] -= t * apq;
    a[(q, q)] += t * apq;
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        let nkp = c * akp - s * akq;
        let nkq = s * akp + c * akq;
        a[(k, p)] = nkp;
        a[(p, k)] = nkp;
        a[(k, q)] = nkq;
        a[(q, k)] = nkq;
    }
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let mut s = 0.0;
    for r in 0..a.rows {
        for c in 0..a.cols {
            if r != c {
                s += a[(r, c)] * a[(r, c)];
            }
        }
    }
    s.sqrt()
}

/// Orthonormal basis of the column space of `m`, via modified Gram-Schmidt
/// with reorthogonalisation. Columns whose residual norm falls below
/// `rel_tol` times the largest column norm are treated as dependent and
/// dropped. Returns the basis as the columns of an `rows × rank` matrix.
pub fn orthonormal_basis(m: &Matrix, rel_tol: f64) -> Matrix {
    let max_norm = (0..m.cols)
        .map(|c| m.column(c).iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for c in 0..m.cols {
        let mut col = m.column(c);
        for _ in 0..2 {
            for b in &basis {
                let proj = dot(b, &col);
                for (x, bi) in col.iter_mut().zip(b) {
                    *x -= proj * bi;
                }
            }
        }
        let nrm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm > rel_tol * max_norm && nrm > 0.0 {
            col.iter_mut().for_each(|x| *x /= nrm);
            basis.push(col);
        }
    }
    Matrix::from_fn(m.rows, basis.len(), |r, c| basis[c][r])
}

/// Largest relative residual `‖b_j − Q Qᵀ b_j‖ / ‖b_j‖` over the columns of
/// `b`, where `Q` is an orthonormal basis (as returned by
/// [`orthonormal_basis`]). Zero columns of `b` are skipped.
pub fn projection_residual(q: &Matrix, b: &Matrix) -> Result<f64> {
    if q.rows != b.rows {
        return Err(shape_err("projection_residual", q, b));
    }
    let mut worst = 0.0f64;
    for c in 0..b.cols {
        let col = b.column(c);
        let nrm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm == 0.0 {
            continue;
        }
        let coeffs = q.tr_mul_vec(&col)?;
        let proj = q.mul_vec(&coeffs)?;
        let res = col
            .iter()
            .zip(&proj)
            .map(|(x, p)| (x - p) * (x - p))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(res / nrm);
    }
    Ok(worst)
}
