//! Dense row-major matrices, softmax and a one-sided Jacobi SVD.
//!
//! Everything here is deliberately small and loop-based: accumulation order
//! is fixed so results are bit-reproducible on one platform, and every
//! product charges its FLOPs to the thread-local tally in [`crate::flops`].

use std::fmt::{self, Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{self, Category};

/// On-disk element type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            _ => Err(Error::Parameter(format!("unknown dtype '{s}' (expected f32 or f64)"))),
        }
    }
}

impl Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

/// Scalar types a [`Matrix`] can hold. Implemented for `f32` and `f64`.
pub trait Real:
    Float + Sum + AddAssign + SubAssign + MulAssign + Debug + Display + Default + Send + Sync + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// `bytes` must hold exactly `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

#[derive(Clone, PartialEq)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()?;
        }
        Ok(())
    }
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("Matrix::new", format!("empty shape {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols} needs {} elements, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Panics on an empty shape; use [`Matrix::new`] for fallible construction.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty matrix {rows}x{cols}");
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(rows > 0 && cols > 0, "empty matrix {rows}x{cols}");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows, e.g. `Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]])`.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.as_ref().len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            let row = row.as_ref();
            if row.len() != c {
                return Err(Error::shape("Matrix::from_rows", "ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn column(v: &[T]) -> Result<Self> {
        Self::new(v.len(), 1, v.to_vec())
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn scale(&self, s: T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| v * s).collect() }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, s: T, other: &Self) -> Result<()> {
        check_same_shape("add_scaled", self, other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// `self += s * u vᵀ` for `u` of length `rows` and `v` of length `cols`.
    pub fn add_outer(&mut self, s: T, u: &[T], v: &[T]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            let su = s * ui;
            if su == T::zero() {
                continue;
            }
            for (a, &vj) in self.row_mut(i).iter_mut().zip(v) {
                *a += su * vj;
            }
        }
    }

    /// Frobenius inner product `Σ aᵢⱼ bᵢⱼ`.
    pub fn dot(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    /// `y = self · x`. Charges `2·rows·cols` FLOPs.
    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(Error::shape(
                "matvec",
                format!("{}x{} times vector of length {}", self.rows, self.cols, x.len()),
            ));
        }
        flops::charge(2 * (self.rows * self.cols) as u64);
        Ok(self.data.chunks_exact(self.cols).map(|row| dot(row, x)).collect())
    }

    /// `y = selfᵀ · x`. Charges `2·rows·cols` FLOPs.
    pub fn matvec_t(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.rows {
            return Err(Error::shape(
                "matvec_t",
                format!("({}x{})ᵀ times vector of length {}", self.rows, self.cols, x.len()),
            ));
        }
        flops::charge(2 * (self.rows * self.cols) as u64);
        let mut y = vec![T::zero(); self.cols];
        for (row, &xi) in self.data.chunks_exact(self.cols).zip(x) {
            for (yj, &a) in y.iter_mut().zip(row) {
                *yj += a * xi;
            }
        }
        Ok(y)
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn check_same_shape<T: Real>(op: &'static str, a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    Ok(())
}

/// Standard matrix product with a fixed i-k-j loop order.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    flops::charge(2 * (a.rows * a.cols * b.cols) as u64);
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == T::zero() {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `acc += g * x`, charged as `len` aggregation FLOPs plus `len` weighting FLOPs.
pub(crate) fn accumulate_weighted<T: Real>(acc: &mut [T], g: T, x: &[T]) {
    flops::charge_to(Category::Aggregation, acc.len() as u64);
    flops::charge_to(Category::Weighting, acc.len() as u64);
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += g * v;
    }
}

/// Returns `g * x`, charged as `len` weighting FLOPs.
pub(crate) fn scaled<T: Real>(g: T, x: &[T]) -> Vec<T> {
    flops::charge_to(Category::Weighting, x.len() as u64);
    x.iter().map(|&v| g * v).collect()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Real>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::shape("softmax", "empty logit vector"));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `√Σ(aᵢⱼ − bᵢⱼ)²`.
pub fn frobenius_distance<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<T> {
    check_same_shape("frobenius_distance", a, b)?;
    Ok(a.data.iter().zip(&b.data).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt())
}

/// Reduced SVD `a = u · diag(sigma) · vt` with `q = min(m, n)`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Matrix<f64>,
    pub sigma: Vec<f64>,
    pub vt: Matrix<f64>,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix<f64> {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.sigma.iter().enumerate() {
                let v = us.get(i, j) * s;
                us.set(i, j, v);
            }
        }
        flops::in_category(Category::Other, || matmul(&us, &self.vt)).expect("conformable by construction")
    }
}

pub const SVD_TOLERANCE: f64 = 1e-12;
pub const SVD_MAX_SWEEPS: usize = 100;

/// One-sided (Hestenes) Jacobi SVD.
///
/// Rank-deficient inputs are fine: zero singular values are kept and the
/// matching left singular vectors are completed to an orthonormal set. Each
/// left singular vector has its first significant entry made non-negative.
pub fn reduced_svd(a: &Matrix<f64>) -> Result<SvdResult> {
    let (m, n) = a.shape();
    let (u, sigma, vt) = if m >= n {
        let (ucols, sigma, vcols) = jacobi_tall(a)?;
        (cols_to_matrix(&ucols, m), sigma, cols_to_matrix(&vcols, n).transpose())
    } else {
        // aᵀ = U' Σ V'ᵀ  ⇒  a = V' Σ U'ᵀ
        let (ucols, sigma, vcols) = jacobi_tall(&a.transpose())?;
        (cols_to_matrix(&vcols, m), sigma, cols_to_matrix(&ucols, n).transpose())
    };
    let mut out = SvdResult { u, sigma, vt };
    fix_signs(&mut out);
    Ok(out)
}

fn cols_to_matrix(cols: &[Vec<f64>], rows: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

type Columns = Vec<Vec<f64>>;

/// SVD of a tall (rows ≥ cols) matrix; returns column lists of U (m×n), sigma, V (n×n).
fn jacobi_tall(a: &Matrix<f64>) -> Result<(Columns, Vec<f64>, Columns)> {
    let (m, n) = a.shape();
    let mut u: Columns = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    let mut v: Columns = (0..n).map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();

    let mut converged = n < 2;
    let mut residual = 0.0;
    for _ in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        residual = 0.0_f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&u[p], &u[p]);
                let beta = dot(&u[q], &u[q]);
                let gamma = dot(&u[p], &u[q]);
                if alpha == 0.0 || beta == 0.0 || gamma == 0.0 {
                    continue;
                }
                let ratio = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(ratio);
                if ratio <= SVD_TOLERANCE {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut u, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = residual <= SVD_TOLERANCE;
    }
    if !converged {
        return Err(Error::Numerical { op: "reduced_svd", residual });
    }

    let norms: Vec<f64> = u.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let smax = norms[order[0]];
    let cutoff = smax * f64::EPSILON;

    let mut ucols: Columns = Vec::with_capacity(n);
    let mut vcols: Columns = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        vcols.push(v[j].clone());
        if s > cutoff && s > 0.0 {
            ucols.push(u[j].iter().map(|x| x / s).collect());
        } else {
            ucols.push(vec![0.0; m]);
            missing.push(slot);
        }
    }
    complete_basis(&mut ucols, &missing);
    Ok((ucols, sigma, vcols))
}

fn rotate(cols: &mut Columns, p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the columns listed in `missing` with unit vectors orthogonal to every other column.
fn complete_basis(cols: &mut Columns, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let m = cols[0].len();
    let mut candidate = 0;
    for &slot in missing {
        loop {
            assert!(candidate < m, "cannot complete basis: more columns than rows");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // Two Gram-Schmidt passes against every accepted column.
            for _ in 0..2 {
                for (k, col) in cols.iter().enumerate() {
                    if k == slot || (missing.contains(&k) && col.iter().all(|&x| x == 0.0)) {
                        continue;
                    }
                    let proj = dot(&e, col);
                    for (ei, ci) in e.iter_mut().zip(col) {
                        *ei -= proj * ci;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 0.5 {
                cols[slot] = e.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

const SIGN_THRESHOLD: f64 = 1e-12;

fn fix_signs(svd: &mut SvdResult) {
    let (m, q) = svd.u.shape();
    for j in 0..q {
        let first = (0..m).map(|i| svd.u.get(i, j)).find(|x| x.abs() > SIGN_THRESHOLD);
        if matches!(first, Some(x) if x < 0.0) {
            for i in 0..m {
                let v = svd.u.get(i, j);
                svd.u.set(i, j, -v);
            }
            for v in svd.vt.row_mut(j) {
                *v = -*v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn naive_matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a.get(i, k) * b.get(k, j);
            }
            acc
        })
    }

    fn rel_err(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
        let d = frobenius_distance(a, b).unwrap();
        let n = b.frobenius_norm();
        if n == 0.0 {
            d
        } else {
            d / n
        }
    }

    fn orthonormality_error(q: &Matrix<f64>) -> f64 {
        let g = naive_matmul(&q.transpose(), q);
        frobenius_distance(&g, &Matrix::identity(g.rows())).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
        let p = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let v = Matrix::from_rows(&[[5.0], [7.0]]).unwrap();
        assert_eq!(matmul(&p, &v).unwrap().data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_matches_naive_loop_exactly() {
        let mut rng = SeededRng::new(3);
        let a = rng.uniform_matrix(3, 4, 1.0);
        let b = rng.uniform_matrix(4, 2, 1.0);
        // Same accumulation order as the naive loop, so equality is exact.
        assert_eq!(matmul(&a, &b).unwrap(), naive_matmul(&a, &b));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::<f64>::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3 times 2x3"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let p = softmax(&[1000.0, 1000.0, 999.0]).unwrap();
        let e = (-1.0f64).exp();
        let expect = [1.0 / (2.0 + e), 1.0 / (2.0 + e), e / (2.0 + e)];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(softmax::<f64>(&[]).is_err());
    }

    #[test]
    fn svd_diagonal_and_zero() {
        let d = Matrix::from_rows(&[[3.0, 0.0], [0.0, 1.0]]).unwrap();
        let s = reduced_svd(&d).unwrap();
        assert_eq!(s.sigma, vec![3.0, 1.0]);
        assert_eq!(s.u, Matrix::identity(2));
        assert_eq!(s.vt, Matrix::identity(2));

        let z = Matrix::<f64>::zeros(2, 3);
        let s = reduced_svd(&z).unwrap();
        assert_eq!(s.sigma, vec![0.0, 0.0]);
        assert_eq!(s.reconstruct(), Matrix::zeros(2, 3));
        assert!(orthonormality_error(&s.u) < 1e-10);
        assert!(orthonormality_error(&s.vt.transpose()) < 1e-10);
    }

    #[test]
    fn svd_random_reconstruction_and_orthonormality() {
        let mut rng = SeededRng::new(11);
        for (m, n) in [(4, 3), (3, 4), (1, 5), (5, 1), (6, 6)] {
            let a = rng.uniform_matrix(m, n, 1.0);
            let s = reduced_svd(&a).unwrap();
            assert_eq!(s.sigma.len(), m.min(n));
            assert!(rel_err(&s.reconstruct(), &a) < 1e-10, "{m}x{n}");
            assert!(orthonormality_error(&s.u) < 1e-10);
            assert!(orthonormality_error(&s.vt.transpose()) < 1e-10);
            assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn svd_rank_deficient_keeps_zero_values() {
        let mut rng = SeededRng::new(5);
        let u = rng.uniform_matrix(5, 1, 1.0);
        let v = rng.uniform_matrix(1, 3, 1.0);
        let a = matmul(&u, &v).unwrap();
        let s = reduced_svd(&a).unwrap();
        assert_eq!(s.sigma.len(), 3);
        assert!(s.sigma[1] < 1e-12 && s.sigma[2] < 1e-12);
        assert!(orthonormality_error(&s.u) < 1e-10);
        assert!(rel_err(&s.reconstruct(), &a) < 1e-10);
    }

    #[test]
    fn svd_sign_convention() {
        let a = Matrix::from_rows(&[[-2.0, 0.0], [0.0, -1.0]]).unwrap();
        let s = reduced_svd(&a).unwrap();
        for j in 0..2 {
            let first = (0..2).map(|i| s.u.get(i, j)).find(|x| x.abs() > 1e-12).unwrap();
            assert!(first > 0.0);
        }
        assert!(rel_err(&s.reconstruct(), &a) < 1e-14);
    }

    #[test]
    fn frobenius_examples() {
        let a = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        assert_eq!(frobenius_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(frobenius_distance(&a, &Matrix::zeros(1, 2)).unwrap(), 5.0);
        let mut rng = SeededRng::new(9);
        let x: Matrix = rng.uniform_matrix(3, 3, 1.0);
        let y: Matrix = rng.uniform_matrix(3, 3, 1.0);
        let mut acc = 0.0_f64;
        for i in 0..3 {
            for j in 0..3 {
                acc += (x.get(i, j) - y.get(i, j)).powi(2);
            }
        }
        assert_eq!(frobenius_distance(&x, &y).unwrap(), acc.sqrt());
        assert!(frobenius_distance(&x, &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn matvec_charges_flops() {
        let a = Matrix::<f64>::zeros(3, 5);
        let (_, t) = flops::measure(|| flops::in_category(Category::Expert, || a.matvec(&[0.0; 5]).unwrap()));
        assert_eq!(t.expert, 30);
    }
}
