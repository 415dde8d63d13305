//! Dense small-matrix primitives and the linear solvers used throughout the crate.
//!
//! Matrices here are tiny (a few dozen rows at most), so everything is a
//! row-major `Vec<f64>` with straightforward loops. Eigen-decompositions are
//! delegated to `nalgebra`; Lyapunov, Bellman and Riccati equations are solved
//! here.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when checking symmetry of user-supplied matrices.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Above this state dimension the Lyapunov solver switches from the direct
/// vectorized solve to the doubling iteration.
pub const DIRECT_LYAPUNOV_MAX_DIM: usize = 32;

const DARE_REL_TOL: f64 = 1e-12;
const DARE_MAX_ITERS: usize = 100_000;

/// Dense real matrix, row-major.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatRepr", into = "MatRepr")]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatRepr> for Mat {
    type Error = Error;
    fn try_from(r: MatRepr) -> Result<Self> {
        Mat::new(r.rows, r.cols, r.data)
    }
}

impl From<Mat> for MatRepr {
    fn from(m: Mat) -> Self {
        MatRepr {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dim("Mat::new", "dimensions must be positive"));
        }
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Mat::new",
                format!("{rows}x{cols} needs {} entries, got {}", rows * cols, data.len()),
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("matrix entries must be finite".into()));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.as_ref().len());
        assert!(n > 0 && m > 0, "from_rows: empty matrix");
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), m, "from_rows: ragged rows");
            data.extend_from_slice(r);
        }
        Mat {
            rows: n,
            cols: m,
            data,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Mat {
            rows: 1,
            cols: 1,
            data: vec![x],
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Mat::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn column(values: &[f64]) -> Self {
        Mat {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `⟨self, other⟩ = Tr(selfᵀ other)`.
    pub fn inner(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape(), "inner: shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "mul_vec: dimension mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `vᵀ self v` for square `self`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        assert!(self.is_square() && self.rows == v.len(), "quad_form: dimension mismatch");
        let mut acc = 0.0;
        for i in 0..self.rows {
            let row = self.row(i);
            let mut s = 0.0;
            for j in 0..self.cols {
                s += row[j] * v[j];
            }
            acc += v[i] * s;
        }
        acc
    }

    pub fn block(&self, r0: usize, c0: usize, nr: usize, nc: usize) -> Mat {
        assert!(r0 + nr <= self.rows && c0 + nc <= self.cols, "block out of range");
        Mat::from_fn(nr, nc, |i, j| self[(r0 + i, c0 + j)])
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, b: &Mat) {
        assert!(
            r0 + b.rows <= self.rows && c0 + b.cols <= self.cols,
            "set_block out of range"
        );
        for i in 0..b.rows {
            for j in 0..b.cols {
                self[(r0 + i, c0 + j)] = b[(i, j)];
            }
        }
    }

    pub fn block_diag(blocks: &[Mat]) -> Mat {
        let rows = blocks.iter().map(Mat::rows).sum();
        let cols = blocks.iter().map(Mat::cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let (mut r, mut c) = (0, 0);
        for b in blocks {
            out.set_block(r, c, b);
            r += b.rows;
            c += b.cols;
        }
        out
    }

    pub fn hstack(blocks: &[Mat]) -> Mat {
        let rows = blocks[0].rows;
        let cols = blocks.iter().map(Mat::cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut c = 0;
        for b in blocks {
            assert_eq!(b.rows, rows, "hstack: row mismatch");
            out.set_block(0, c, b);
            c += b.cols;
        }
        out
    }

    pub fn vstack(blocks: &[Mat]) -> Mat {
        let cols = blocks[0].cols;
        let rows = blocks.iter().map(Mat::rows).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut r = 0;
        for b in blocks {
            assert_eq!(b.cols, cols, "vstack: column mismatch");
            out.set_block(r, 0, b);
            r += b.rows;
        }
        out
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &Mat) -> Mat {
        let (p, q) = other.shape();
        Mat::from_fn(self.rows * p, self.cols * q, |i, j| {
            self[(i / p, j / q)] * other[(i % p, j % q)]
        })
    }

    pub fn inverse(&self) -> Result<Mat> {
        if !self.is_square() {
            return Err(Error::dim("inverse", "matrix must be square"));
        }
        let lu = Lu::factor(self)?;
        let n = self.rows;
        let mut out = Mat::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[j] = 1.0;
            let col = lu.solve(&e);
            for i in 0..n {
                out[(i, j)] = col[i];
            }
        }
        Ok(out)
    }

    /// Solves `self · X = rhs`.
    pub fn solve(&self, rhs: &Mat) -> Result<Mat> {
        if !self.is_square() || self.rows != rhs.rows {
            return Err(Error::dim("solve", "incompatible shapes"));
        }
        let lu = Lu::factor(self)?;
        let mut out = Mat::zeros(rhs.rows, rhs.cols);
        let mut col = vec![0.0; rhs.rows];
        for j in 0..rhs.cols {
            for i in 0..rhs.rows {
                col[i] = rhs[(i, j)];
            }
            let x = lu.solve(&col);
            for i in 0..rhs.rows {
                out[(i, j)] = x[i];
            }
        }
        Ok(out)
    }

    /// Largest singular value.
    pub fn spectral_norm(&self) -> f64 {
        singular_values(self).into_iter().fold(0.0, f64::max)
    }

    /// Smallest singular value.
    pub fn min_singular_value(&self) -> f64 {
        singular_values(self).into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Mul for &Mat {
    type Output = Mat;
    fn mul(self, rhs: &Mat) -> Mat {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul: {}x{} * {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rrow = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, b) in orow.iter_mut().zip(rrow) {
                    *o += a * b;
                }
            }
        }
        out
    }
}

impl Add for &Mat {
    type Output = Mat;
    fn add(self, rhs: &Mat) -> Mat {
        assert_eq!(self.shape(), rhs.shape(), "add: shape mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &Mat {
    type Output = Mat;
    fn sub(self, rhs: &Mat) -> Mat {
        assert_eq!(self.shape(), rhs.shape(), "sub: shape mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Neg for &Mat {
    type Output = Mat;
    fn neg(self) -> Mat {
        self.scale(-1.0)
    }
}

/// LU factorization with partial pivoting.
pub(crate) struct Lu {
    n: usize,
    lu: Vec<f64>,
    piv: Vec<usize>,
}

impl Lu {
    pub(crate) fn factor(m: &Mat) -> Result<Self> {
        let n = m.rows;
        let mut lu = m.data.clone();
        let mut piv: Vec<usize> = (0..n).collect();
        let scale = m.max_abs().max(f64::MIN_POSITIVE);
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if pmax <= 1e-14 * scale {
                return Err(Error::Singular { context: "LU factorization" });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                piv.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Lu { n, lu, piv })
    }

    pub(crate) fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.piv.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s / self.lu[i * n + i];
        }
        x
    }
}

/// Symmetric matrix. Construction symmetrizes `(Z + Zᵀ)/2`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Mat", into = "Mat")]
pub struct SymMat(Mat);

impl TryFrom<Mat> for SymMat {
    type Error = Error;
    fn try_from(m: Mat) -> Result<Self> {
        SymMat::new(m)
    }
}

impl From<SymMat> for Mat {
    fn from(s: SymMat) -> Mat {
        s.0
    }
}

impl fmt::Debug for SymMat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Sym{:?}", self.0)
    }
}

impl SymMat {
    /// Checks symmetry to [`SYMMETRY_TOL`] (relative to the largest entry)
    /// and symmetrizes.
    pub fn new(m: Mat) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::dim("SymMat::new", "matrix must be square"));
        }
        let dev = asymmetry(&m);
        if dev > SYMMETRY_TOL * m.max_abs().max(1.0) {
            return Err(Error::NotSymmetric { deviation: dev });
        }
        Ok(SymMat::symmetrize(&m))
    }

    /// `(m + mᵀ)/2` without any tolerance check.
    pub fn symmetrize(m: &Mat) -> Self {
        assert!(m.is_square(), "symmetrize: matrix must be square");
        let n = m.rows;
        SymMat(Mat::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)])))
    }

    pub fn identity(n: usize) -> Self {
        SymMat(Mat::identity(n))
    }

    pub fn zeros(n: usize) -> Self {
        SymMat(Mat::zeros(n, n))
    }

    pub fn diag(values: &[f64]) -> Self {
        SymMat(Mat::diag(values))
    }

    pub fn scalar(x: f64) -> Self {
        SymMat(Mat::scalar(x))
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }

    pub fn add(&self, other: &SymMat) -> SymMat {
        SymMat(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &SymMat) -> SymMat {
        SymMat(&self.0 - &other.0)
    }

    pub fn scale(&self, s: f64) -> SymMat {
        SymMat(self.0.scale(s))
    }

    pub fn block_diag(blocks: &[SymMat]) -> SymMat {
        let mats: Vec<Mat> = blocks.iter().map(|b| b.0.clone()).collect();
        SymMat(Mat::block_diag(&mats))
    }

    /// `M self Mᵀ`.
    pub fn congruence(&self, m: &Mat) -> SymMat {
        SymMat::symmetrize(&(&(m * &self.0) * &m.transpose()))
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let m = self.0.to_nalgebra();
        let mut ev: Vec<f64> = CONVERGENCE_EPS
            .iter()
            .find_map(|&eps| nalgebra::SymmetricEigen::try_new(m.clone(), eps, ITER_CAP))
            .expect("symmetric eigenvalue iteration converges")
            .eigenvalues
            .iter()
            .cloned()
            .collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        *self.eigenvalues().last().unwrap()
    }

    /// Lower-triangular `L` with `L Lᵀ = self`, for positive semi-definite
    /// input. Zero (or slightly negative) pivots produce zero columns.
    pub fn cholesky_psd(&self) -> Mat {
        let n = self.dim();
        let a = &self.0;
        let tol = 1e-13 * a.max_abs().max(f64::MIN_POSITIVE);
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if d <= tol {
                continue;
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        l
    }
}

impl std::ops::Deref for SymMat {
    type Target = Mat;
    fn deref(&self) -> &Mat {
        &self.0
    }
}

fn asymmetry(m: &Mat) -> f64 {
    let n = m.rows;
    let mut dev: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            dev = dev.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    dev
}

/// Length of `svec` for an `n × n` symmetric matrix.
pub fn svec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Symmetric vectorization: upper triangle row by row, off-diagonal entries
/// scaled by √2 so that `⟨svec(A), svec(B)⟩ = Tr(AB)`.
pub fn svec(z: &SymMat) -> Vec<f64> {
    let n = z.dim();
    let mut out = Vec::with_capacity(svec_len(n));
    for i in 0..n {
        for j in i..n {
            let v = z[(i, j)];
            out.push(if i == j { v } else { v * std::f64::consts::SQRT_2 });
        }
    }
    out
}

/// Like [`svec`] but takes a plain square matrix, checking symmetry.
pub fn svec_checked(z: &Mat) -> Result<Vec<f64>> {
    Ok(svec(&SymMat::new(z.clone())?))
}

/// Inverse of [`svec`].
pub fn smat(v: &[f64]) -> Result<SymMat> {
    let n = triangular_root(v.len()).ok_or_else(|| {
        Error::dim(
            "smat",
            format!("length {} is not a triangular number", v.len()),
        )
    })?;
    let mut m = Mat::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            let x = if i == j {
                v[k]
            } else {
                v[k] / std::f64::consts::SQRT_2
            };
            m[(i, j)] = x;
            m[(j, i)] = x;
            k += 1;
        }
    }
    Ok(SymMat(m))
}

fn triangular_root(len: usize) -> Option<usize> {
    if len == 0 {
        return None;
    }
    let n = (((8 * len + 1) as f64).sqrt() as usize - 1) / 2;
    (n.saturating_sub(1)..=n + 1).find(|&k| k > 0 && svec_len(k) == len)
}

// The QR iterations stall at machine-epsilon deflation on matrices with many
// repeated eigenvalues (block-exchangeable systems), so looser deflation
// thresholds are tried in turn.
const CONVERGENCE_EPS: [f64; 4] = [f64::EPSILON, 1e-14, 1e-13, 1e-12];
const ITER_CAP: usize = 10_000;

fn singular_values(m: &Mat) -> Vec<f64> {
    let n = m.to_nalgebra();
    CONVERGENCE_EPS
        .iter()
        .find_map(|&eps| nalgebra::SVD::try_new(n.clone(), false, false, eps, ITER_CAP))
        .expect("SVD iteration converges")
        .singular_values
        .iter()
        .cloned()
        .collect()
}

/// Maximum modulus of the eigenvalues of a square matrix.
pub fn spectral_radius(f: &Mat) -> Result<f64> {
    if !f.is_square() {
        return Err(Error::dim("spectral_radius", "matrix must be square"));
    }
    if f.rows == 1 {
        return Ok(f[(0, 0)].abs());
    }
    let m = f.to_nalgebra();
    // QR sweeps can stall on structured inputs; the transpose and a fixed
    // reflection similarity have the same spectrum but different iterates.
    let n = m.nrows();
    let v = nalgebra::DVector::from_fn(n, |i, _| 1.0 + i as f64);
    let h = nalgebra::DMatrix::identity(n, n) - (&v * v.transpose()) * (2.0 / v.norm_squared());
    let candidates = [m.clone(), m.transpose(), &h * &m * &h];
    let schur = candidates
        .iter()
        .find_map(|c| CONVERGENCE_EPS.iter().find_map(|&eps| nalgebra::Schur::try_new(c.clone(), eps, ITER_CAP)))
        .ok_or_else(|| Error::Numerical("Schur iteration did not converge".into()))?;
    Ok(schur.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max))
}

/// Solves the discrete Lyapunov equation `Σ = W + F Σ Fᵀ`.
pub fn solve_lyapunov(f: &Mat, w: &SymMat) -> Result<SymMat> {
    if !f.is_square() || f.rows != w.dim() {
        return Err(Error::dim(
            "solve_lyapunov",
            format!("F is {:?}, W is {}x{}", f.shape(), w.dim(), w.dim()),
        ));
    }
    let rho = spectral_radius(f)?;
    if rho >= 1.0 {
        return Err(Error::Unstable { rho });
    }
    let d = f.rows;
    let sigma = if d <= DIRECT_LYAPUNOV_MAX_DIM {
        lyapunov_direct(f, w)?
    } else {
        lyapunov_doubling(f, w)
    };
    Ok(sigma)
}

/// Solves the adjoint equation `P = M + Fᵀ P F`.
pub fn solve_bellman(f: &Mat, m: &SymMat) -> Result<SymMat> {
    solve_lyapunov(&f.transpose(), m)
}

/// `W + F Σ Fᵀ − Σ`.
pub fn lyapunov_residual(f: &Mat, w: &SymMat, sigma: &SymMat) -> Mat {
    let fsf = &(f * sigma.as_mat()) * &f.transpose();
    &(&fsf + w.as_mat()) - sigma.as_mat()
}

fn lyapunov_direct(f: &Mat, w: &SymMat) -> Result<SymMat> {
    let d = f.rows;
    // Row-major vec: vec(F Σ Fᵀ) = (F ⊗ F) vec(Σ).
    let op = &Mat::identity(d * d) - &f.kron(f);
    let lu = Lu::factor(&op)?;
    let mut x = lu.solve(w.as_slice());
    // One step of iterative refinement.
    let sigma = Mat::new(d, d, x.clone())?;
    let r = lyapunov_residual(f, w, &SymMat::symmetrize(&sigma));
    let dx = lu.solve(r.as_slice());
    for (xi, di) in x.iter_mut().zip(dx) {
        *xi += di;
    }
    Ok(SymMat::symmetrize(&Mat::new(d, d, x)?))
}

/// Squared Smith iteration: `Σ ← Σ + Fₖ Σ Fₖᵀ`, `Fₖ₊₁ = Fₖ²`, which sums the
/// series `Σ_t F^t W (F^t)ᵀ` in doubling blocks.
fn lyapunov_doubling(f: &Mat, w: &SymMat) -> SymMat {
    let mut sigma = w.as_mat().clone();
    let mut fk = f.clone();
    for _ in 0..64 {
        let inc = &(&fk * &sigma) * &fk.transpose();
        sigma = &sigma + &inc;
        fk = &fk * &fk;
        if inc.frobenius_norm() <= 1e-17 * sigma.frobenius_norm().max(1.0) || fk.max_abs() == 0.0 {
            break;
        }
    }
    SymMat::symmetrize(&sigma)
}

/// Stabilizing solution of the discrete algebraic Riccati equation and the
/// associated optimal gain.
#[derive(Clone, Debug)]
pub struct DareSolution {
    pub p: SymMat,
    pub k: Mat,
    pub iterations: usize,
}

/// Riccati right-hand side `Q + AᵀPA − AᵀPB (R + BᵀPB)⁻¹ BᵀPA`, together
/// with the gain `(R + BᵀPB)⁻¹ BᵀPA`.
pub fn riccati_map(a: &Mat, b: &Mat, q: &SymMat, r: &SymMat, p: &SymMat) -> Result<(SymMat, Mat)> {
    let at = a.transpose();
    let bt = b.transpose();
    let pa = p.as_mat() * a;
    let pb = p.as_mat() * b;
    let gram = r.as_mat() + &(&bt * &pb);
    let btpa = &bt * &pa;
    let k = gram.solve(&btpa)?;
    let next = &(q.as_mat() + &(&at * &pa)) - &(&(&at * &pb) * &k);
    Ok((SymMat::symmetrize(&next), k))
}

/// Value iteration on the Riccati recursion from `P₀ = Q`.
pub fn solve_dare(a: &Mat, b: &Mat, q: &SymMat, r: &SymMat) -> Result<DareSolution> {
    let d = a.rows;
    if !a.is_square() || b.rows != d || q.dim() != d || r.dim() != b.cols {
        return Err(Error::dim("solve_dare", "inconsistent A, B, Q, R shapes"));
    }
    let mut p = q.clone();
    for it in 1..=DARE_MAX_ITERS {
        let (next, _) = riccati_map(a, b, q, r, &p)?;
        if !next.is_finite() || next.max_abs() > 1e150 {
            return Err(Error::NotStabilizable { iterations: it });
        }
        let step = (next.as_mat() - p.as_mat()).frobenius_norm();
        let scale = next.frobenius_norm();
        p = next;
        if step <= DARE_REL_TOL * scale || step == 0.0 {
            let (_, k) = riccati_map(a, b, q, r, &p)?;
            let closed = a - &(b * &k);
            if spectral_radius(&closed)? >= 1.0 {
                return Err(Error::NotStabilizable { iterations: it });
            }
            return Ok(DareSolution {
                p,
                k,
                iterations: it,
            });
        }
    }
    Err(Error::NotStabilizable {
        iterations: DARE_MAX_ITERS,
    })
}

/// Symmetric Kronecker product as an operator on svec-space:
/// `sym_kron(A, B) · svec(X) = svec((A X Bᵀ + B X Aᵀ)/2)`.
pub fn sym_kron(a: &Mat, b: &Mat) -> Result<Mat> {
    if !a.is_square() || a.shape() != b.shape() {
        return Err(Error::dim("sym_kron", "operands must be square and equal-sized"));
    }
    let n = a.rows;
    let m = svec_len(n);
    let (at, bt) = (a.transpose(), b.transpose());
    let mut out = Mat::zeros(m, m);
    let mut e = vec![0.0; m];
    for j in 0..m {
        e.iter_mut().for_each(|x| *x = 0.0);
        e[j] = 1.0;
        let x = smat(&e)?;
        let axb = &(&(a * x.as_mat()) * &bt);
        let bxa = &(&(b * x.as_mat()) * &at);
        let col = svec(&SymMat::symmetrize(&(axb + bxa).scale(0.5)));
        for i in 0..m {
            out[(i, j)] = col[i];
        }
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
