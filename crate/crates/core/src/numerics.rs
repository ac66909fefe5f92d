//! Dense linear-algebra kernels: a row-major matrix type, a cyclic Jacobi
//! symmetric eigensolver, truncated left singular vectors through the Gram
//! matrix, and the Sherman–Morrison rank-one inverse update.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum number of full Jacobi sweeps before giving up.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Convergence threshold on the off-diagonal Frobenius norm, relative to `‖S‖_F`.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
/// Eigenvalues at or below this level are treated as exact zeros downstream.
pub const EIGEN_CLAMP: f64 = 1e-12;
/// Relative asymmetry accepted by [`sym_eig`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("invalid rank: requested {requested}, at most {available} available")]
    InvalidRank { requested: usize, available: usize },
    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),
}

/// Row-major dense matrix of finite `f64` entries.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::InvalidMatrix(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::InvalidMatrix(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(NumericsError::InvalidMatrix("ragged rows".into()));
        }
        Self::new(r, c, rows.iter().flatten().copied().collect())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<f64>], rows: usize) -> Self {
        Self::from_fn(rows, columns.len(), |i, j| columns[j][i])
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<Self, NumericsError> {
        if self.cols != rhs.rows {
            return Err(NumericsError::InvalidMatrix(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · selfᵀ`.
    pub fn gram_rows(&self) -> Self {
        let n = self.rows;
        let mut out = Self::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = dot(self.row(i), self.row(j));
                out.data[i * n + j] = v;
                out.data[j * n + i] = v;
            }
        }
        out
    }

    /// `selfᵀ · self`.
    pub fn gram_cols(&self) -> Self {
        let n = self.cols;
        let mut out = Self::zeros(n, n);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..n {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                for j in i..n {
                    out.data[i * n + j] += ri * row[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                out.data[i * n + j] = out.data[j * n + i];
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * factor).collect() }
    }

    /// `self += factor · other`, element by element.
    pub fn add_scaled(&mut self, factor: f64, other: &DenseMatrix) -> Result<(), NumericsError> {
        if self.shape() != other.shape() {
            return Err(NumericsError::InvalidMatrix(format!(
                "shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<Self, NumericsError> {
        let mut out = self.clone();
        out.add_scaled(-1.0, other)?;
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let tol = rel_tol * self.frobenius_norm().max(f64::MIN_POSITIVE);
        let n = self.rows;
        (0..n).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Spectrum of a symmetric matrix, eigenvalues descending, eigenvectors as columns.
#[derive(Clone, Debug)]
pub struct EigenResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DenseMatrix,
}

impl EigenResult {
    /// Eigenvalues with everything at or below [`EIGEN_CLAMP`] set to zero.
    pub fn clamped_eigenvalues(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|&l| if l <= EIGEN_CLAMP { 0.0 } else { l }).collect()
    }
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
pub fn sym_eig(s: &DenseMatrix) -> Result<EigenResult, NumericsError> {
    if !s.is_square() {
        return Err(NumericsError::InvalidMatrix(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            s.rows, s.cols
        )));
    }
    if !s.is_symmetric(SYMMETRY_TOLERANCE) {
        return Err(NumericsError::InvalidMatrix("matrix is not symmetric".into()));
    }
    let n = s.rows;
    let scale = s.frobenius_norm();
    let mut a = DenseMatrix::from_fn(n, n, |i, j| 0.5 * (s[(i, j)] + s[(j, i)]));
    let mut v = DenseMatrix::identity(n);
    let threshold = JACOBI_TOLERANCE * scale;

    let mut converged = false;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let off = off_diagonal_norm(&a);
        if off == 0.0 || off < threshold {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.data[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.data[q * n + q] - a.data[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                rotate(&mut a, &mut v, p, q, c, sn);
            }
        }
    }
    if !converged && off_diagonal_norm(&a) >= threshold {
        return Err(NumericsError::NumericalBreakdown(format!(
            "Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let eigenvectors = DenseMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(EigenResult { eigenvalues, eigenvectors })
}

fn off_diagonal_norm(a: &DenseMatrix) -> f64 {
    let n = a.rows;
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a.data[i * n + j] * a.data[i * n + j];
            }
        }
    }
    sum.sqrt()
}

// A ← Jᵀ A J and V ← V J for the plane rotation annihilating a[p][q].
fn rotate(a: &mut DenseMatrix, v: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows;
    for k in 0..n {
        let akp = a.data[k * n + p];
        let akq = a.data[k * n + q];
        a.data[k * n + p] = c * akp - s * akq;
        a.data[k * n + q] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a.data[p * n + k];
        let aqk = a.data[q * n + k];
        a.data[p * n + k] = c * apk - s * aqk;
        a.data[q * n + k] = s * apk + c * aqk;
    }
    a.data[p * n + q] = 0.0;
    a.data[q * n + p] = 0.0;
    for k in 0..n {
        let vkp = v.data[k * n + p];
        let vkq = v.data[k * n + q];
        v.data[k * n + p] = c * vkp - s * vkq;
        v.data[k * n + q] = s * vkp + c * vkq;
    }
}

/// Top-`k` left singular vectors of `w` as the columns of a `rows × k` matrix.
///
/// Works on the smaller Gram matrix. Directions whose squared singular value
/// is negligible relative to the largest are replaced by a Gram–Schmidt
/// completion over the coordinate axes in index order, so rank-deficient
/// inputs still yield a deterministic orthonormal basis. Each column is
/// sign-normalized so its largest-magnitude entry is positive.
pub fn topk_left_singular(w: &DenseMatrix, k: usize) -> Result<DenseMatrix, NumericsError> {
    let (rows, cols) = w.shape();
    let available = rows.min(cols);
    if k == 0 || k > available {
        return Err(NumericsError::InvalidRank { requested: k, available });
    }

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    if rows <= cols {
        let eig = sym_eig(&w.gram_rows())?;
        let cutoff = negligible_level(&eig.eigenvalues);
        for j in 0..k {
            if eig.eigenvalues[j] > cutoff {
                basis.push(eig.eigenvectors.column(j));
            }
        }
    } else {
        let eig = sym_eig(&w.gram_cols())?;
        let cutoff = negligible_level(&eig.eigenvalues);
        for j in 0..k {
            let lambda = eig.eigenvalues[j];
            if lambda > cutoff {
                let u = w.matvec(&eig.eigenvectors.column(j));
                let sigma = lambda.sqrt();
                basis.push(u.into_iter().map(|x| x / sigma).collect());
            }
        }
    }

    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(k);
    for u in basis {
        if let Some(q) = orthonormalize_against(&u, &ortho) {
            ortho.push(q);
        }
    }
    let mut axis = 0;
    while ortho.len() < k && axis < rows {
        let mut e = vec![0.0; rows];
        e[axis] = 1.0;
        axis += 1;
        if let Some(q) = orthonormalize_against(&e, &ortho) {
            ortho.push(q);
        }
    }
    if ortho.len() < k {
        return Err(NumericsError::NumericalBreakdown("could not complete orthonormal basis".into()));
    }
    for col in &mut ortho {
        let (imax, _) = col
            .iter()
            .enumerate()
            .fold((0, 0.0_f64), |best, (i, &x)| if x.abs() > best.1 + 1e-12 { (i, x.abs()) } else { best });
        if col[imax] < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(DenseMatrix::from_columns(&ortho, rows))
}

fn negligible_level(eigenvalues: &[f64]) -> f64 {
    let top = eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    EIGEN_CLAMP * top.max(f64::MIN_POSITIVE)
}

// Two-pass modified Gram–Schmidt; None when the residual is numerically zero.
fn orthonormalize_against(v: &[f64], basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    let original = norm(v);
    if original == 0.0 {
        return None;
    }
    let mut r = v.to_vec();
    for _ in 0..2 {
        for b in basis {
            let c = dot(&r, b);
            r.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
    }
    let n = norm(&r);
    if n <= 1e-8 * original {
        return None;
    }
    r.iter_mut().for_each(|x| *x /= n);
    Some(r)
}

/// `(Z + g gᵀ)⁻¹` from `Z⁻¹` by the Sherman–Morrison identity.
pub fn rank_one_inverse_update(z_inv: &DenseMatrix, g: &[f64]) -> Result<DenseMatrix, NumericsError> {
    if !z_inv.is_square() || z_inv.rows != g.len() {
        return Err(NumericsError::InvalidMatrix(format!(
            "inverse is {}x{}, update vector has length {}",
            z_inv.rows,
            z_inv.cols,
            g.len()
        )));
    }
    let w = z_inv.matvec(g);
    let denom = 1.0 + dot(g, &w);
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(NumericsError::NumericalBreakdown(format!(
            "Sherman-Morrison denominator {denom} is not positive"
        )));
    }
    let n = g.len();
    let mut out = z_inv.clone();
    // (wᵢwⱼ)/d keeps the result bitwise symmetric.
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            out.data[i * n + j] -= w[i] * w[j] / denom;
        }
    }
    Ok(out)
}

/// `(λI + Σ gᵢgᵢᵀ)⁻¹` kept as a scaled identity minus accumulated rank-one
/// corrections, so quadratic forms cost O(updates · dim) instead of O(dim²).
///
/// Each update is the same Sherman–Morrison step as [`rank_one_inverse_update`].
#[derive(Clone, Debug)]
pub struct FactoredInverse {
    dim: usize,
    inv_reg: f64,
    corrections: Vec<Vec<f64>>,
}

impl FactoredInverse {
    pub fn scaled_identity(dim: usize, lambda_reg: f64) -> Self {
        assert!(lambda_reg > 0.0, "ridge scale must be positive");
        Self { dim, inv_reg: 1.0 / lambda_reg, corrections: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn updates(&self) -> usize {
        self.corrections.len()
    }

    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = g.iter().map(|x| x * self.inv_reg).collect();
        for c in &self.corrections {
            let proj = dot(c, g);
            out.iter_mut().zip(c).for_each(|(o, ci)| *o -= proj * ci);
        }
        out
    }

    /// `gᵀ Z⁻¹ g`.
    pub fn quad_form(&self, g: &[f64]) -> f64 {
        let mut q = dot(g, g) * self.inv_reg;
        for c in &self.corrections {
            let proj = dot(c, g);
            q -= proj * proj;
        }
        q
    }

    pub fn update(&mut self, g: &[f64]) -> Result<(), NumericsError> {
        if g.len() != self.dim {
            return Err(NumericsError::InvalidMatrix(format!(
                "update vector has length {}, expected {}",
                g.len(),
                self.dim
            )));
        }
        let w = self.apply(g);
        let denom = 1.0 + dot(g, &w);
        if !(denom > 0.0) || !denom.is_finite() {
            return Err(NumericsError::NumericalBreakdown(format!(
                "Sherman-Morrison denominator {denom} is not positive"
            )));
        }
        let s = denom.sqrt();
        self.corrections.push(w.into_iter().map(|x| x / s).collect());
        Ok(())
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let n = self.dim;
        let mut m = DenseMatrix::identity(n).scaled(self.inv_reg);
        for c in &self.corrections {
            for i in 0..n {
                for j in 0..n {
                    m.data[i * n + j] -= c[i] * c[j];
                }
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn identity_spectrum() {
        let eig = sym_eig(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(eig.eigenvalues, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_spectrum_and_axes() {
        let eig = sym_eig(&DenseMatrix::from_diag(&[1.0, 4.0, 0.0])).unwrap();
        assert_eq!(eig.eigenvalues, vec![4.0, 1.0, 0.0]);
        assert_eq!(eig.eigenvectors.column(0), vec![0.0, 1.0, 0.0]);
        assert_eq!(eig.eigenvectors.column(1), vec![1.0, 0.0, 0.0]);
        assert_eq!(eig.eigenvectors.column(2), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_non_square_and_asymmetric() {
        let rect = DenseMatrix::zeros(2, 3);
        assert!(matches!(sym_eig(&rect), Err(NumericsError::InvalidMatrix(_))));
        let asym = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&asym), Err(NumericsError::InvalidMatrix(_))));
    }

    #[test]
    fn zero_matrix_converges_immediately() {
        let eig = sym_eig(&DenseMatrix::zeros(4, 4)).unwrap();
        assert!(eig.eigenvalues.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn rejects_non_finite_entries() {
        assert!(DenseMatrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(DenseMatrix::new(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn topk_of_diagonal() {
        let w = DenseMatrix::from_diag(&[3.0, 2.0, 1.0]);
        let u = topk_left_singular(&w, 2).unwrap();
        assert_eq!(u.shape(), (3, 2));
        assert_close(u[(0, 0)].abs(), 1.0, 1e-12);
        assert_close(u[(1, 1)].abs(), 1.0, 1e-12);
        assert_close(u[(2, 0)], 0.0, 1e-12);
        assert_close(u[(2, 1)], 0.0, 1e-12);
    }

    #[test]
    fn topk_of_rank_one() {
        let uvec = [1.0, -2.0, 2.0, 0.5];
        let vvec = [0.3, 1.0, -1.0];
        let w = DenseMatrix::from_fn(4, 3, |i, j| uvec[i] * vvec[j]);
        let u = topk_left_singular(&w, 1).unwrap();
        let n = norm(&uvec);
        let sign = u[(0, 0)].signum() * uvec[0].signum();
        for i in 0..4 {
            assert_close(u[(i, 0)], sign * uvec[i] / n, 1e-10);
        }
    }

    #[test]
    fn topk_completes_rank_deficient_input() {
        let w = DenseMatrix::from_fn(5, 5, |i, j| if i == 3 && j == 0 { 2.0 } else { 0.0 });
        let u = topk_left_singular(&w, 3).unwrap();
        assert_close(u[(3, 0)], 1.0, 1e-12);
        // completion runs over the axes in order, skipping the covered one
        assert_close(u[(0, 1)], 1.0, 1e-12);
        assert_close(u[(1, 2)], 1.0, 1e-12);
        let again = topk_left_singular(&w, 3).unwrap();
        assert_eq!(u, again);
    }

    #[test]
    fn topk_rank_bounds() {
        let w = DenseMatrix::identity(3);
        assert!(matches!(topk_left_singular(&w, 0), Err(NumericsError::InvalidRank { .. })));
        assert!(matches!(
            topk_left_singular(&w, 4),
            Err(NumericsError::InvalidRank { requested: 4, available: 3 })
        ));
    }

    #[test]
    fn sherman_morrison_closed_form() {
        let out = rank_one_inverse_update(&DenseMatrix::identity(2), &[1.0, 0.0]).unwrap();
        assert_eq!(out.as_slice(), &[0.5, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn sherman_morrison_zero_update() {
        let z = DenseMatrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let out = rank_one_inverse_update(&z, &[0.0, 0.0]).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn sherman_morrison_detects_corrupted_state() {
        let z = DenseMatrix::identity(2).scaled(-1.0);
        assert!(matches!(
            rank_one_inverse_update(&z, &[2.0, 0.0]),
            Err(NumericsError::NumericalBreakdown(_))
        ));
    }

    #[test]
    fn factored_inverse_matches_dense_updates() {
        let mut factored = FactoredInverse::scaled_identity(3, 2.0);
        let mut dense = DenseMatrix::identity(3).scaled(0.5);
        for g in [[1.0, 0.5, -0.2], [0.0, 2.0, 1.0], [0.3, -0.3, 0.9]] {
            factored.update(&g).unwrap();
            dense = rank_one_inverse_update(&dense, &g).unwrap();
        }
        assert!(factored.to_dense().max_abs_diff(&dense) < 1e-14);
        let probe = [0.2, -1.0, 0.7];
        let expected = dot(&probe, &dense.matvec(&probe));
        assert_close(factored.quad_form(&probe), expected, 1e-14);
    }
}
