//! Dense matrix carrier and the spectral utilities the rest of the crate
//! builds on.
//!
//! [`DenseMatrix`] is a thin newtype over [`nalgebra::DMatrix`] that
//! guarantees finite entries. Its external representation (files, the C ABI)
//! is row-major; the in-memory layout is whatever nalgebra uses.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Relative factor of the numerical-rank cutoff `max(m, n) * sigma_1 * 1e-12`.
pub const RANK_RTOL: f64 = 1e-12;

// nalgebra's bidiagonal QR silently returns a wrong factorisation on some
// rank-deficient inputs when the convergence threshold is machine epsilon.
const SVD_EPS: f64 = 5.0 * f64::EPSILON;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix(DMatrix<f64>);

impl DenseMatrix {
    /// Wraps an nalgebra matrix, rejecting NaN and infinite entries.
    pub fn new(inner: DMatrix<f64>) -> Result<Self> {
        for j in 0..inner.ncols() {
            for i in 0..inner.nrows() {
                if !inner[(i, j)].is_finite() {
                    return Err(Error::NonFinite { row: i, col: j });
                }
            }
        }
        Ok(Self(inner))
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::Shape {
                rows,
                cols,
                len: data.len(),
            });
        }
        Self::new(DMatrix::from_row_slice(rows, cols, &data))
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        Self::new(DMatrix::from_fn(rows, cols, f))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self(DMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    /// Internal constructor for results of arithmetic on finite inputs.
    pub(crate) fn wrap(inner: DMatrix<f64>) -> Self {
        debug_assert!(inner.iter().all(|v| v.is_finite()), "non-finite matrix");
        Self(inner)
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows() * self.cols());
        for i in 0..self.rows() {
            for j in 0..self.cols() {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.0.norm_squared()
    }

    pub fn frobenius(&self) -> f64 {
        self.0.norm()
    }
}

impl Deref for DenseMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

impl From<DenseMatrix> for DMatrix<f64> {
    fn from(m: DenseMatrix) -> Self {
        m.0
    }
}

/// Thin SVD with singular values in non-increasing order.
#[derive(Clone, Debug)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

impl ThinSvd {
    pub fn rank_tolerance(&self) -> f64 {
        let (m, n) = (self.u.nrows(), self.v_t.ncols());
        let s1 = self.singular_values.iter().copied().fold(0.0, f64::max);
        m.max(n) as f64 * s1 * RANK_RTOL
    }

    pub fn rank(&self) -> usize {
        let tol = self.rank_tolerance();
        self.singular_values.iter().filter(|&&s| s > tol).count()
    }

    /// Best rank-`r` approximation assembled from the leading triplets.
    pub fn truncate(&self, r: usize) -> DMatrix<f64> {
        let r = r.min(self.singular_values.len());
        let mut us = self.u.columns(0, r).into_owned();
        for (k, mut col) in us.column_iter_mut().enumerate() {
            col *= self.singular_values[k];
        }
        us * self.v_t.rows(0, r)
    }
}

pub fn thin_svd(m: &DMatrix<f64>) -> Result<ThinSvd> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        let k = rows.min(cols);
        return Ok(ThinSvd {
            u: DMatrix::zeros(rows, k),
            singular_values: DVector::zeros(k),
            v_t: DMatrix::zeros(k, cols),
        });
    }
    let svd = nalgebra::SVD::try_new(m.clone(), true, true, SVD_EPS, 0)
        .ok_or_else(|| Error::Numerical(format!("SVD of a {rows}x{cols} matrix did not converge")))?;
    let mut u = svd.u.expect("u requested");
    let mut v_t = svd.v_t.expect("v_t requested");
    let mut sv = svd.singular_values;

    // try_new already orders, but the contract here must not depend on it.
    let k = sv.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    if order.iter().enumerate().any(|(i, &o)| i != o) {
        let u0 = u.clone();
        let v0 = v_t.clone();
        let s0 = sv.clone();
        for (dst, &src) in order.iter().enumerate() {
            u.set_column(dst, &u0.column(src));
            v_t.set_row(dst, &v0.row(src));
            sv[dst] = s0[src];
        }
    }
    Ok(ThinSvd {
        u,
        singular_values: sv,
        v_t,
    })
}

pub fn singular_values(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(DVector::zeros(0));
    }
    let mut sv = m
        .clone()
        .try_svd(false, false, SVD_EPS, 0)
        .ok_or_else(|| Error::Numerical("singular values did not converge".into()))?
        .singular_values;
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Orthonormal basis of the column span of `m` from a thin SVD, keeping the
/// directions whose singular value clears the rank tolerance.
pub fn orthonormal_basis(m: &DenseMatrix) -> Result<DenseMatrix> {
    basis_of(m.as_matrix()).map(DenseMatrix::wrap)
}

pub(crate) fn basis_of(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = thin_svd(m)?;
    let rank = svd.rank();
    if rank == 0 {
        return Err(Error::EmptyBasis);
    }
    Ok(svd.u.columns(0, rank).into_owned())
}

/// `(I - Q Q^T) a` for an orthonormal `q`.
pub(crate) fn residual_off_span(q: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    a - q * (q.transpose() * a)
}

/// Moore-Penrose pseudoinverse with the crate-wide rank cutoff.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = thin_svd(m)?;
    let tol = svd.rank_tolerance();
    let (rows, cols) = m.shape();
    let mut out = DMatrix::zeros(cols, rows);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            out += (svd.v_t.row(k).transpose() / s) * svd.u.column(k).transpose();
        }
    }
    Ok(out)
}

pub fn best_rank_approximation(m: &DMatrix<f64>, r: usize) -> Result<DMatrix<f64>> {
    Ok(thin_svd(m)?.truncate(r))
}

pub fn numerical_rank(m: &DMatrix<f64>) -> Result<usize> {
    Ok(thin_svd(m)?.rank())
}

/// `sigma_1 / sigma_min`, with `sigma_min` the smallest singular value above
/// the rank tolerance.
pub fn condition_number(m: &DMatrix<f64>) -> Result<f64> {
    let svd = thin_svd(m)?;
    let rank = svd.rank();
    if rank == 0 {
        return Err(Error::ZeroMatrix("condition-number input"));
    }
    Ok(svd.singular_values[0] / svd.singular_values[rank - 1])
}

pub fn spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    Ok(singular_values(m)?.iter().copied().fold(0.0, f64::max))
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> Result<f64> {
    Ok(singular_values(m)?.sum())
}

pub fn gaussian_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    mean: f64,
    std: f64,
    rng: &mut R,
) -> DMatrix<f64> {
    // Row-major draw order so that the stream maps onto the external layout.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let z: f64 = StandardNormal.sample(rng);
            m[(i, j)] = mean + std * z;
        }
    }
    m
}

/// Haar-ish random orthonormal `m x r` basis (QR of a Gaussian matrix).
pub fn random_orthonormal<R: Rng + ?Sized>(m: usize, r: usize, rng: &mut R) -> DMatrix<f64> {
    assert!(r <= m, "cannot fit {r} orthonormal columns in dimension {m}");
    let g = gaussian_matrix(m, r, 0.0, 1.0, rng);
    let qr = g.qr();
    qr.q().columns(0, r).into_owned()
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
