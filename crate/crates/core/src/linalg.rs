//! Dense real linear algebra sized for the worker dimension.
//!
//! Everything here operates on tall `n × m` matrices (`n` parameters, `m`
//! workers, `m` small) or on `m × m` matrices. The thin SVD of a tall matrix is
//! obtained from the eigendecomposition of its Gram matrix, so no `n × n`
//! buffer is ever formed.

use std::ops::{Deref, DerefMut};

use crate::error::{check_len, Error, Result};

/// Relative cutoff used by [`thin_svd_via_gram`] when callers have no opinion.
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-12;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_TOLERANCE: f64 = 1e-14;
const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Owned dense vector of `f64`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Vector(values.to_vec())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
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

impl From<Vec<f64>> for Vector {
    fn from(values: Vec<f64>) -> Self {
        Vector(values)
    }
}

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Vector(iter.into_iter().collect())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // four independent partial sums so the loop vectorizes; order is fixed
    let mut acc = [0.0; 4];
    let (a4, a_tail) = a.split_at(a.len() / 4 * 4);
    let (b4, b_tail) = b.split_at(a4.len());
    for (x, y) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = a_tail.iter().zip(b_tail).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dense matrix stored column by column.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("Matrix::from_col_major", rows * cols, data.len())?;
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from row-major literals, which reads naturally in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.len());
        let mut m = Matrix::zeros(n_rows, n_cols);
        for (i, row) in rows.iter().enumerate() {
            check_len("Matrix::from_rows", n_cols, row.len())?;
            for (j, &v) in row.iter().enumerate() {
                m.set(i, j, v);
            }
        }
        Ok(m)
    }

    pub fn from_columns(columns: &[Vector]) -> Result<Self> {
        let rows = columns.first().map_or(0, |c| c.len());
        let mut data = Vec::with_capacity(rows * columns.len());
        for c in columns {
            check_len("Matrix::from_columns", rows, c.len())?;
            data.extend_from_slice(c);
        }
        Ok(Matrix {
            rows,
            cols: columns.len(),
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_col_major(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[col * self.rows + row]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[col * self.rows + row] = value;
    }

    pub fn column(&self, col: usize) -> &[f64] {
        &self.data[col * self.rows..(col + 1) * self.rows]
    }

    pub fn column_mut(&mut self, col: usize) -> &mut [f64] {
        &mut self.data[col * self.rows..(col + 1) * self.rows]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero, and a 0-row matrix still has `cols` empty columns
        (0..self.cols).map(move |j| self.column(j))
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for j in 0..self.cols {
            for i in 0..self.rows {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }
}

/// `M · x` for `M` of shape `n × m` and `x` of length `m`.
pub fn matvec(m: &Matrix, x: &[f64]) -> Result<Vector> {
    check_len("matvec", m.cols(), x.len())?;
    let mut y = Vector::zeros(m.rows());
    for (col, &xj) in m.columns().zip(x) {
        axpy(xj, col, &mut y);
    }
    Ok(y)
}

/// `Mᵀ · x` for `M` of shape `n × m` and `x` of length `n`.
pub fn matvec_transposed(m: &Matrix, x: &[f64]) -> Result<Vector> {
    check_len("matvec_transposed", m.rows(), x.len())?;
    Ok(m.columns().map(|col| dot(col, x)).collect())
}

/// Gram matrix `Mᵀ M`. The result is exactly symmetric.
pub fn gram(m: &Matrix) -> Matrix {
    let k = m.cols();
    let mut s = Matrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = dot(m.column(i), m.column(j));
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    s
}

/// Eigenpairs of a symmetric matrix, sorted by eigenvalue, largest first.
#[derive(Clone, Debug)]
pub struct SymEigResult {
    pub eigenvalues: Vector,
    /// Column `k` pairs with `eigenvalues[k]`.
    pub eigenvectors: Matrix,
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps until the off-diagonal Frobenius norm drops to `1e-14 · ‖S‖_F` or
/// 100 sweeps have run. Ties in the eigenvalue order keep the original
/// diagonal position. Each eigenvector is signed so that its largest-magnitude
/// entry is positive.
pub fn sym_eig(s: &Matrix) -> Result<SymEigResult> {
    let n = s.rows();
    check_len("sym_eig (square)", n, s.cols())?;
    let scale = s.frobenius_norm();
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = (s.get(i, j) - s.get(j, i)).abs();
            if gap > SYMMETRY_TOLERANCE * scale {
                return Err(Error::NotSymmetric {
                    row: i,
                    col: j,
                    gap,
                });
            }
        }
    }

    let mut a = s.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    let mut v = Matrix::identity(n);
    let target = JACOBI_TOLERANCE * scale;

    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&a) <= target {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                let (app, aqq) = (a.get(p, p), a.get(q, q));
                rotate_columns(&mut a, p, q, c, sn);
                rotate_rows(&mut a, p, q, c, sn);
                a.set(p, p, app - t * apq);
                a.set(q, q, aqq + t * apq);
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                rotate_columns(&mut v, p, q, c, sn);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal eigenvalues keep their diagonal order
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)));

    let eigenvalues: Vector = order.iter().map(|&i| a.get(i, i)).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        let src = v.column(i);
        let pivot = src
            .iter()
            .enumerate()
            .fold((0, 0.0_f64), |best, (r, x)| {
                if x.abs() > best.1.abs() {
                    (r, *x)
                } else {
                    best
                }
            })
            .1;
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (dst, x) in eigenvectors.column_mut(k).iter_mut().zip(src) {
            *dst = sign * x;
        }
    }
    Ok(SymEigResult {
        eigenvalues,
        eigenvectors,
    })
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut sum = 0.0;
    for j in 0..n {
        for i in 0..n {
            if i != j {
                sum += a.get(i, j) * a.get(i, j);
            }
        }
    }
    sum.sqrt()
}

fn rotate_columns(a: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..a.rows() {
        let akp = a.get(k, p);
        let akq = a.get(k, q);
        a.set(k, p, c * akp - s * akq);
        a.set(k, q, s * akp + c * akq);
    }
}

fn rotate_rows(a: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..a.cols() {
        let apk = a.get(p, k);
        let aqk = a.get(q, k);
        a.set(p, k, c * apk - s * aqk);
        a.set(q, k, s * apk + c * aqk);
    }
}

/// Thin SVD of a tall `n × m` matrix `G = U Σ Vᵀ`.
#[derive(Clone, Debug)]
pub struct ThinSvd {
    /// All `m` singular values, descending and nonnegative.
    pub sigma: Vector,
    /// `m × m`; column `k` is `v_k`.
    pub right_vectors: Matrix,
    /// `u_k = G v_k / ‖G v_k‖` for the leading `k` with `σ_k > tol · σ_1`.
    pub left_vectors: Vec<Vector>,
}

impl ThinSvd {
    /// Number of left singular vectors that were formed.
    pub fn retained(&self) -> usize {
        self.left_vectors.len()
    }

    pub fn right_vector(&self, k: usize) -> &[f64] {
        self.right_vectors.column(k)
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma.first().copied().unwrap_or(0.0)
    }
}

/// Thin SVD through the eigendecomposition of `GᵀG`.
///
/// Singular values are taken as `‖G v_k‖` rather than `sqrt(λ_k)`. The two
/// agree in exact arithmetic, but the square root of a rounded Gram
/// eigenvalue cannot resolve anything below about `1e-8 · σ_1`, while the
/// norm is accurate to rounding in `G` itself. Pairs are re-sorted (stably)
/// in case that reorders near-ties in the tail. Left vectors are only formed
/// for `σ_k > rank_tolerance · σ_1`, so a zero matrix yields none.
pub fn thin_svd_via_gram(g: &Matrix, rank_tolerance: f64) -> Result<ThinSvd> {
    if !(rank_tolerance >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rank_tolerance must be >= 0, got {rank_tolerance}"
        )));
    }
    let eig = sym_eig(&gram(g))?;
    let m = g.cols();
    let mut pairs = Vec::with_capacity(m);
    for k in 0..m {
        pairs.push((matvec(g, eig.eigenvectors.column(k))?.norm(), k));
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    let sigma: Vector = pairs.iter().map(|p| p.0).collect();
    let mut right_vectors = Matrix::zeros(m, m);
    for (dst, &(_, k)) in pairs.iter().enumerate() {
        right_vectors
            .column_mut(dst)
            .copy_from_slice(eig.eigenvectors.column(k));
    }
    let sigma_max = sigma.first().copied().unwrap_or(0.0);

    let mut left_vectors = Vec::new();
    if sigma_max > 0.0 {
        for (k, &s) in sigma.iter().enumerate() {
            if s <= rank_tolerance * sigma_max {
                break;
            }
            let mut u = matvec(g, right_vectors.column(k))?;
            u.iter_mut().for_each(|x| *x /= s);
            left_vectors.push(u);
        }
    }

    Ok(ThinSvd {
        sigma,
        right_vectors,
        left_vectors,
    })
}
