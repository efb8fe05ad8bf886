//! Dense linear algebra on small row-major matrices.
//!
//! Everything here is sized for diagnostics-scale problems (a few hundred
//! unknowns at most). The kernels are straightforward loops; the routines
//! that matter for correctness checks (LU inverse, extreme singular values,
//! power iteration) are written to be predictable rather than fast.

use std::fmt;
use std::ops::{Deref, DerefMut, Index, IndexMut};

use rand::Rng;
use thiserror::Error;

use crate::config::rng_stream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix data has {got} entries, expected {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, got: usize },
    #[error("non-finite entry at index {index}")]
    NonFinite { index: usize },
    #[error("{op}: matrix must be square, got {rows}x{cols}")]
    NotSquare { op: &'static str, rows: usize, cols: usize },
    #[error("matrix is numerically singular (pivot {pivot:e} at column {column})")]
    Singular { pivot: f64, column: usize },
    #[error("angle undefined for a zero vector")]
    ZeroVector,
    #[error("empty matrix")]
    Empty,
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense vector of `f64`.
#[derive(Clone, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
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
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Vector(iter.into_iter().collect())
    }
}

impl Vector {
    pub fn zeros(n: usize) -> Self {
        Vector(vec![0.0; n])
    }

    pub fn basis(n: usize, i: usize) -> Self {
        let mut v = Self::zeros(n);
        v[i] = 1.0;
        v
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        check_len("dot", self, other)?;
        Ok(dot_unchecked(self, other))
    }

    pub fn norm2(&self) -> f64 {
        dot_unchecked(self, self).sqrt()
    }

    pub fn norm1(&self) -> f64 {
        self.0.iter().map(|x| x.abs()).sum()
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &Vector) -> Result<()> {
        check_len("axpy", self, x)?;
        for (y, xi) in self.0.iter_mut().zip(x.iter()) {
            *y += alpha * xi;
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> Vector {
        self.0.iter().map(|x| alpha * x).collect()
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        check_len("add", self, other)?;
        Ok(self.iter().zip(other.iter()).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        check_len("sub", self, other)?;
        Ok(self.iter().zip(other.iter()).map(|(a, b)| a - b).collect())
    }

    /// Concatenation, used to compare gradients over `[theta; u]` jointly.
    pub fn concat(&self, other: &Vector) -> Vector {
        let mut out = self.0.clone();
        out.extend_from_slice(other);
        Vector(out)
    }
}

fn check_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(LinalgError::DimensionMismatch {
            op,
            left: (a.len(), 1),
            right: (b.len(), 1),
        });
    }
    Ok(())
}

/// Four independent partial sums so the loop vectorizes.
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadShape {
                rows,
                cols,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite { index });
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(LinalgError::BadShape {
                    rows: rows.len(),
                    cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = *d;
        }
        m
    }

    /// Builds a matrix column by column.
    pub fn from_columns(rows: usize, columns: &[Vector]) -> Result<Self> {
        let cols = columns.len();
        let mut m = Self::zeros(rows, cols);
        for (c, col) in columns.iter().enumerate() {
            if col.len() != rows {
                return Err(LinalgError::BadShape {
                    rows,
                    cols,
                    got: col.len(),
                });
            }
            for (r, x) in col.iter().enumerate() {
                m[(r, c)] = *x;
            }
        }
        Ok(m)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn scaled(&self, alpha: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| alpha * x).collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.same_shape("add", other)?;
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.same_shape("sub", other)?;
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    fn same_shape(&self, op: &'static str, other: &Mat) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot_unchecked(&self.data, &self.data).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                op: "matvec",
                left: self.shape(),
                right: (x.len(), 1),
            });
        }
        Ok(self.matvec_unchecked(x))
    }

    pub(crate) fn matvec_unchecked(&self, x: &[f64]) -> Vector {
        (0..self.rows).map(|r| dot_unchecked(self.row(r), x)).collect()
    }

    /// `selfᵀ * x` without forming the transpose.
    pub fn matvec_transpose(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "matvec_transpose",
                left: (self.cols, self.rows),
                right: (x.len(), 1),
            });
        }
        Ok(self.matvec_transpose_unchecked(x))
    }

    pub(crate) fn matvec_transpose_unchecked(&self, x: &[f64]) -> Vector {
        let mut out = vec![0.0; self.cols];
        for (r, xr) in x.iter().enumerate() {
            if *xr == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * xr;
            }
        }
        Vector(out)
    }
}

pub fn gemm(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "gemm",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for p in 0..a.cols {
            let aip = a[(i, p)];
            if aip == 0.0 {
                continue;
            }
            let brow = b.row(p);
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(out)
}

pub fn matvec(a: &Mat, x: &Vector) -> Result<Vector> {
    a.matvec(x)
}

/// Result of a power-iteration estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerEstimate {
    pub estimate: f64,
    pub iters: usize,
    pub converged: bool,
}

fn seeded_unit_vector(n: usize, seed: u64, label: &str) -> Vector {
    let mut rng = rng_stream(seed, label);
    let mut v: Vector = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let nrm = v.norm2();
    if nrm > 0.0 {
        v.iter_mut().for_each(|x| *x /= nrm);
    } else {
        v[0] = 1.0;
    }
    v
}

/// Largest singular value by power iteration on `mᵀm`.
///
/// The estimate at each step is `‖m x‖ / ‖x‖`, which is exact as soon as `x`
/// is a top right-singular vector. Stops once the relative change between two
/// consecutive estimates is at most `tol`, or once the iterate direction stops
/// moving.
pub fn power_iteration_sigma(m: &Mat, max_iters: usize, tol: f64, seed: u64) -> PowerEstimate {
    let not_run = PowerEstimate {
        estimate: 0.0,
        iters: 0,
        converged: false,
    };
    if m.data.iter().all(|x| *x == 0.0) || m.cols == 0 {
        return not_run;
    }
    let mut x = seeded_unit_vector(m.cols, seed, "power-sigma");
    let mut prev = f64::NAN;
    let mut estimate = 0.0;
    for it in 1..=max_iters.max(1) {
        let y = m.matvec_unchecked(&x);
        estimate = y.norm2() / x.norm2();
        let mut z = m.matvec_transpose_unchecked(&y);
        let zn = z.norm2();
        if zn == 0.0 {
            // x sits in the null space; the seed was unlucky, but the
            // estimate of zero is a lower bound that we report as unconverged.
            return PowerEstimate {
                estimate,
                iters: it,
                converged: false,
            };
        }
        z.iter_mut().for_each(|v| *v /= zn);
        let step = z.iter().zip(x.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let rel_change = ((estimate - prev) / estimate).abs();
        x = z;
        if step <= tol || rel_change <= tol {
            return PowerEstimate {
                estimate,
                iters: it,
                converged: true,
            };
        }
        prev = estimate;
    }
    PowerEstimate {
        estimate,
        iters: max_iters.max(1),
        converged: false,
    }
}

/// Spectral radius estimate by power iteration on `m` itself.
///
/// Each step applies `m` twice and reports `sqrt(‖m² x‖ / ‖x‖)`. Working with
/// `m²` keeps the iteration stable when the dominant eigenvalues come as a
/// `±ρ` pair, which is common for symmetric weights.
pub fn power_iteration_rho(m: &Mat, max_iters: usize, tol: f64, seed: u64) -> Result<PowerEstimate> {
    if !m.is_square() {
        return Err(LinalgError::NotSquare {
            op: "power_iteration_rho",
            rows: m.rows,
            cols: m.cols,
        });
    }
    if m.rows == 0 {
        return Err(LinalgError::Empty);
    }
    let mut x = seeded_unit_vector(m.cols, seed, "power-rho");
    let mut prev = f64::NAN;
    let mut estimate = 0.0;
    for it in 1..=max_iters.max(1) {
        let y = m.matvec_unchecked(&x);
        let mut z = m.matvec_unchecked(&y);
        let zn = z.norm2();
        if zn == 0.0 || y.norm2() == 0.0 {
            // Degenerate: nilpotent part annihilated the iterate.
            return Ok(PowerEstimate {
                estimate: 0.0,
                iters: it,
                converged: false,
            });
        }
        estimate = (zn / x.norm2()).sqrt();
        z.iter_mut().for_each(|v| *v /= zn);
        let step = z.iter().zip(x.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let rel_change = ((estimate - prev) / estimate).abs();
        x = z;
        if step <= tol || rel_change <= tol {
            return Ok(PowerEstimate {
                estimate,
                iters: it,
                converged: true,
            });
        }
        prev = estimate;
    }
    Ok(PowerEstimate {
        estimate,
        iters: max_iters.max(1),
        converged: false,
    })
}

/// Extreme singular values of a small dense matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvdExtremes {
    pub sigma_max: f64,
    pub sigma_min: f64,
    /// `sigma_max / sigma_min`, or `+inf` when `sigma_min < 1e-300`.
    pub kappa: f64,
}

/// Largest and smallest singular values via a full SVD (nalgebra's
/// Golub–Kahan bidiagonalization). `sigma_min` is taken over the
/// `min(rows, cols)` singular values.
pub fn svd_extremes(m: &Mat) -> Result<SvdExtremes> {
    if m.rows == 0 || m.cols == 0 {
        return Err(LinalgError::Empty);
    }
    let dm = nalgebra::DMatrix::from_row_slice(m.rows, m.cols, &m.data);
    let sv = dm.singular_values();
    let sigma_max = sv.iter().cloned().fold(0.0, f64::max);
    let sigma_min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let kappa = if sigma_min < 1e-300 {
        f64::INFINITY
    } else {
        sigma_max / sigma_min
    };
    Ok(SvdExtremes {
        sigma_max,
        sigma_min,
        kappa,
    })
}

/// Spectral (operator-2) norm.
pub fn spectral_norm(m: &Mat) -> Result<f64> {
    Ok(svd_extremes(m)?.sigma_max)
}

/// LU factorization with partial pivoting, `P m = L U` packed in one matrix.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Mat,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(m: &Mat) -> Result<Lu> {
        if !m.is_square() {
            return Err(LinalgError::NotSquare {
                op: "lu",
                rows: m.rows,
                cols: m.cols,
            });
        }
        let n = m.rows;
        if n == 0 {
            return Err(LinalgError::Empty);
        }
        let threshold = 1e-12 * m.max_abs();
        let mut lu = m.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pivot) =
                (k..n)
                    .map(|r| (r, lu[(r, k)].abs()))
                    .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot <= threshold || pivot == 0.0 {
                return Err(LinalgError::Singular { pivot, column: k });
            }
            if p != k {
                for c in 0..n {
                    lu.data.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
            }
            let d = lu[(k, k)];
            for r in k + 1..n {
                let f = lu[(r, k)] / d;
                lu[(r, k)] = f;
                if f != 0.0 {
                    for c in k + 1..n {
                        lu[(r, c)] -= f * lu[(k, c)];
                    }
                }
            }
        }
        Ok(Lu { lu, perm })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vector> {
        let n = self.lu.rows;
        if b.len() != n {
            return Err(LinalgError::DimensionMismatch {
                op: "lu_solve",
                left: self.lu.shape(),
                right: (b.len(), 1),
            });
        }
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 0..n {
            let s = dot_unchecked(&self.lu.row(r)[..r], &x[..r]);
            x[r] -= s;
        }
        for r in (0..n).rev() {
            let s = dot_unchecked(&self.lu.row(r)[r + 1..], &x[r + 1..]);
            x[r] = (x[r] - s) / self.lu[(r, r)];
        }
        Ok(Vector(x))
    }
}

/// Inverse of a small square matrix by LU with partial pivoting.
pub fn dense_inverse(m: &Mat) -> Result<Mat> {
    let lu = Lu::factor(m)?;
    let n = m.rows;
    let cols = (0..n)
        .map(|i| lu.solve(&Vector::basis(n, i)))
        .collect::<Result<Vec<_>>>()?;
    Mat::from_columns(n, &cols)
}

pub fn dense_solve(m: &Mat, b: &Vector) -> Result<Vector> {
    Lu::factor(m)?.solve(b)
}

pub fn cosine_similarity(a: &Vector, b: &Vector) -> Result<f64> {
    check_len("cosine_similarity", a, b)?;
    let (na, nb) = (a.norm2(), b.norm2());
    if na == 0.0 || nb == 0.0 {
        return Err(LinalgError::ZeroVector);
    }
    Ok((dot_unchecked(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `Q diag(mu) Qᵀ` with `Q` orthonormalized from a seeded random matrix.
///
/// Builds symmetric test instances with a prescribed spectrum.
pub fn symmetric_with_spectrum(mu: &[f64], seed: u64) -> Mat {
    let n = mu.len();
    let mut rng = rng_stream(seed, "orthonormal-basis");
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let p = dot_unchecked(u, &v);
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let nv = dot_unchecked(&v, &v).sqrt();
        if nv > 1e-6 {
            q.push(v.iter().map(|x| x / nv).collect());
        }
    }
    let mut m = Mat::zeros(n, n);
    for (k, u) in q.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] += mu[k] * u[i] * u[j];
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_mat(n: usize, seed: u64) -> Mat {
        let mut rng = rng_stream(seed, "test-mat");
        Mat::new(n, n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn kernels_basic_cases() {
        let v = Mat::identity(2).matvec(&Vector::from(vec![3.0, 4.0])).unwrap();
        assert_eq!(v.as_slice(), &[3.0, 4.0]);
        let d = Vector::from(vec![1.0, 0.0]).dot(&Vector::from(vec![0.0, 1.0])).unwrap();
        assert_eq!(d, 0.0);
        let p = gemm(&Mat::from_diag(&[2.0, 3.0]), &Mat::from_diag(&[4.0, 5.0])).unwrap();
        assert_eq!(p, Mat::from_diag(&[8.0, 15.0]));
    }

    #[test]
    fn dimension_mismatch_names_both_shapes() {
        let err = gemm(&Mat::zeros(2, 3), &Mat::zeros(2, 3)).unwrap_err();
        assert_eq!(
            err,
            LinalgError::DimensionMismatch {
                op: "gemm",
                left: (2, 3),
                right: (2, 3)
            }
        );
        assert!(err.to_string().contains("(2, 3)"));
        assert!(Mat::identity(2).matvec(&[1.0; 3]).is_err());
        assert!(Mat::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Mat::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn matvec_transpose_matches_explicit_transpose() {
        let m = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let x = [1.0, -1.0];
        assert_eq!(m.matvec_transpose(&x).unwrap(), m.transpose().matvec(&x).unwrap());
    }

    #[test]
    fn sigma_diag_and_identity() {
        let e = power_iteration_sigma(&Mat::from_diag(&[2.0, 1.0]), 1000, 1e-14, 1);
        assert_abs_diff_eq!(e.estimate, 2.0, epsilon = 1e-8);
        let e = power_iteration_sigma(&Mat::identity(4), 100, 1e-12, 7);
        assert_eq!(e.estimate, 1.0);
        assert_eq!(e.iters, 1);
        assert!(e.converged);
        let z = power_iteration_sigma(&Mat::zeros(3, 3), 100, 1e-12, 7);
        assert_eq!((z.estimate, z.iters), (0.0, 0));
    }

    #[test]
    fn sigma_matches_constructed_spectrum() {
        let mu = [0.3, -0.95, 0.5, 0.1, -0.2, 0.7, 0.05, -0.6];
        let m = symmetric_with_spectrum(&mu, 11);
        let e = power_iteration_sigma(&m, 10_000, 1e-15, 3);
        assert_abs_diff_eq!(e.estimate, 0.95, epsilon = 1e-6);
    }

    #[test]
    fn rho_cases() {
        let e = power_iteration_rho(&Mat::from_diag(&[0.9, 0.5]), 1000, 1e-14, 2).unwrap();
        assert_abs_diff_eq!(e.estimate, 0.9, epsilon = 1e-8);
        assert!(e.converged);

        let nil = Mat::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let e = power_iteration_rho(&nil, 100, 1e-12, 2).unwrap();
        assert!(!e.converged);
        assert_eq!(e.estimate, 0.0);

        let m = symmetric_with_spectrum(&[0.75, -0.3], 5);
        let e = power_iteration_rho(&m, 1000, 1e-14, 9).unwrap();
        assert_abs_diff_eq!(e.estimate, 0.75, epsilon = 1e-6);

        assert!(power_iteration_rho(&Mat::zeros(2, 3), 10, 1e-8, 0).is_err());
    }

    #[test]
    fn rho_with_opposite_sign_pair() {
        let m = symmetric_with_spectrum(&[0.8, -0.8, 0.1], 21);
        let e = power_iteration_rho(&m, 1000, 1e-14, 1).unwrap();
        assert_abs_diff_eq!(e.estimate, 0.8, epsilon = 1e-10);
    }

    #[test]
    fn svd_diagonal_cases() {
        let s = svd_extremes(&Mat::from_diag(&[3.0, 1.0])).unwrap();
        assert_abs_diff_eq!(s.sigma_max, 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s.sigma_min, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s.kappa, 3.0, epsilon = 1e-13);
        let s = svd_extremes(&Mat::identity(5)).unwrap();
        assert_eq!((s.sigma_max, s.sigma_min, s.kappa), (1.0, 1.0, 1.0));
        let s = svd_extremes(&Mat::from_diag(&[2.0, 1.0, 0.5])).unwrap();
        assert_abs_diff_eq!(s.kappa, 4.0, epsilon = 1e-13);
        let s = svd_extremes(&Mat::from_diag(&[2.0, 0.0])).unwrap();
        assert!(s.kappa.is_infinite());
    }

    #[test]
    fn svd_of_orthogonal_is_unit() {
        let q = symmetric_with_spectrum(&[1.0, -1.0, 1.0, -1.0, 1.0, 1.0], 4);
        let s = svd_extremes(&q).unwrap();
        assert_abs_diff_eq!(s.sigma_max, 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(s.sigma_min, 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(s.kappa, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn inverse_cases() {
        let inv = dense_inverse(&Mat::from_diag(&[2.0, 4.0])).unwrap();
        assert_eq!(inv, Mat::from_diag(&[0.5, 0.25]));
        let m = Mat::identity(2).sub(&Mat::identity(2).scaled(0.5)).unwrap();
        assert_eq!(dense_inverse(&m).unwrap(), Mat::identity(2).scaled(2.0));

        let a = random_mat(8, 3).add(&Mat::identity(8).scaled(4.0)).unwrap();
        let prod = gemm(&a, &dense_inverse(&a).unwrap()).unwrap();
        let resid = prod.sub(&Mat::identity(8)).unwrap().max_abs();
        assert!(resid <= 1e-10, "residual {resid}");
    }

    #[test]
    fn singular_matrix_is_reported() {
        let m = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(dense_inverse(&m), Err(LinalgError::Singular { .. })));
    }

    #[test]
    fn cosine_cases() {
        let g = Vector::from(vec![0.3, -1.2, 2.0]);
        assert_abs_diff_eq!(cosine_similarity(&g, &g).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine_similarity(&g, &g.scaled(-1.0)).unwrap(), -1.0, epsilon = 1e-15);
        let c = cosine_similarity(&Vector::from(vec![1.0, 0.0]), &Vector::from(vec![0.0, 1.0]));
        assert_eq!(c.unwrap(), 0.0);
        assert_eq!(cosine_similarity(&g, &Vector::zeros(3)), Err(LinalgError::ZeroVector));
    }

    proptest! {
        #[test]
        fn sigma_bounded_by_frobenius(seed in 0u64..10_000, n in 1usize..9) {
            let m = random_mat(n, seed);
            let e = power_iteration_sigma(&m, 200, 1e-10, seed);
            prop_assert!(e.estimate <= m.frobenius_norm() * (1.0 + 1e-12));
        }

        #[test]
        fn double_inverse_is_identity(seed in 0u64..10_000, n in 1usize..9) {
            let m = random_mat(n, seed).add(&Mat::identity(n).scaled(3.0)).unwrap();
            prop_assume!(svd_extremes(&m).unwrap().kappa <= 1e4);
            let back = dense_inverse(&dense_inverse(&m).unwrap()).unwrap();
            prop_assert!(back.sub(&m).unwrap().max_abs() <= 1e-8);
        }

        #[test]
        fn cosine_scale_invariant(
            a in proptest::collection::vec(-10.0f64..10.0, 4),
            b in proptest::collection::vec(-10.0f64..10.0, 4),
            alpha in 1e-3f64..1e3,
            beta in 1e-3f64..1e3,
        ) {
            let (a, b) = (Vector::from(a), Vector::from(b));
            prop_assume!(a.norm2() > 1e-6 && b.norm2() > 1e-6);
            let c0 = cosine_similarity(&a, &b).unwrap();
            let c1 = cosine_similarity(&a.scaled(alpha), &b.scaled(beta)).unwrap();
            prop_assert!((c0 - c1).abs() <= 1e-12);
        }
    }
}
