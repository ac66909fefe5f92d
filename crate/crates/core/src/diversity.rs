//! Vendi diversity: the exponential of the Shannon entropy of the eigenvalues
//! of a normalized cosine-similarity kernel.

use thiserror::Error;

use crate::numerics::{dot, norm, sym_eig, DenseMatrix, NumericsError, EIGEN_CLAMP};

/// Unit-norm tolerance for embedding rows.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;
/// Eigenvalues of `K/n` more negative than this mean the kernel is not PSD.
pub const NEGATIVE_EIGEN_TOLERANCE: f64 = 1e-8;
/// Default window of most-recent dataset items entering a candidate's Vendi score.
pub const DEFAULT_VENDI_CAP: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiversityError {
    #[error("invalid embedding set: {0}")]
    InvalidEmbeddings(String),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `n ≥ 1` unit-norm vectors of a common dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self, DiversityError> {
        let dim = vectors
            .first()
            .map(Vec::len)
            .ok_or_else(|| DiversityError::InvalidEmbeddings("no vectors".into()))?;
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(DiversityError::InvalidEmbeddings(format!(
                    "row {i} has dimension {}, expected {dim}",
                    v.len()
                )));
            }
            let n = norm(v);
            if !n.is_finite() || (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(DiversityError::InvalidEmbeddings(format!("row {i} has norm {n}")));
            }
        }
        Ok(Self { dim, vectors })
    }

    /// Normalizes every row; all-zero rows become the first basis vector.
    pub fn normalized(vectors: Vec<Vec<f64>>) -> Result<Self, DiversityError> {
        let vectors = vectors.into_iter().map(normalize_or_axis).collect();
        Self::new(vectors)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn into_vectors(self) -> Vec<Vec<f64>> {
        self.vectors
    }
}

pub(crate) fn normalize_or_axis(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n > 0.0 && n.is_finite() {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
        if let Some(first) = v.first_mut() {
            *first = 1.0;
        }
    }
    v
}

/// Cosine kernel `K = E·Eᵀ` of unit-norm rows.
pub fn similarity_matrix(set: &EmbeddingSet) -> DenseMatrix {
    let n = set.len();
    let mut k = DenseMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        for j in 0..i {
            let s = dot(&set.vectors[i], &set.vectors[j]);
            k[(i, j)] = s;
            k[(j, i)] = s;
        }
    }
    k
}

/// Vendi score of a PSD kernel with unit diagonal, in `[1, n]`.
pub fn vendi_score(kernel: &DenseMatrix) -> Result<f64, DiversityError> {
    if !kernel.is_square() || kernel.rows() == 0 {
        return Err(DiversityError::InvalidKernel(format!(
            "kernel must be square and non-empty, got {}x{}",
            kernel.rows(),
            kernel.cols()
        )));
    }
    let n = kernel.rows();
    if let Some(i) = (0..n).find(|&i| (kernel[(i, i)] - 1.0).abs() > UNIT_NORM_TOLERANCE) {
        return Err(DiversityError::InvalidKernel(format!("diagonal entry {i} is {}", kernel[(i, i)])));
    }
    let eig = sym_eig(&kernel.scaled(1.0 / n as f64)).map_err(|e| match e {
        NumericsError::InvalidMatrix(msg) => DiversityError::InvalidKernel(msg),
        other => other.into(),
    })?;
    score_from_spectrum(&eig.eigenvalues, n)
}

/// Vendi score straight from unit-norm rows.
///
/// The nonzero spectrum of `E·Eᵀ/n` equals that of `Eᵀ·E/n`, so the smaller
/// of the two Gram matrices is decomposed.
pub fn vendi_from_vectors(rows: &[&[f64]]) -> Result<f64, DiversityError> {
    let n = rows.len();
    if n == 0 {
        return Err(DiversityError::InvalidEmbeddings("no vectors".into()));
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(DiversityError::InvalidEmbeddings("mixed dimensions".into()));
    }
    let e = DenseMatrix::from_fn(n, dim, |i, j| rows[i][j]);
    let gram = if n <= dim { e.gram_rows() } else { e.gram_cols() };
    let eig = sym_eig(&gram.scaled(1.0 / n as f64))?;
    score_from_spectrum(&eig.eigenvalues, n)
}

pub fn vendi_of_set(set: &EmbeddingSet) -> Result<f64, DiversityError> {
    let rows: Vec<&[f64]> = set.vectors.iter().map(Vec::as_slice).collect();
    vendi_from_vectors(&rows)
}

/// Vendi of `batch ∪ history`, where only the `cap` most recent history rows
/// participate when a cap is set.
pub fn vendi_with_history(
    batch: &[Vec<f64>],
    history: &[Vec<f64>],
    cap: Option<usize>,
) -> Result<f64, DiversityError> {
    let start = match cap {
        Some(c) => history.len().saturating_sub(c),
        None => 0,
    };
    let rows: Vec<&[f64]> = batch.iter().chain(&history[start..]).map(Vec::as_slice).collect();
    vendi_from_vectors(&rows)
}

fn score_from_spectrum(eigenvalues: &[f64], n: usize) -> Result<f64, DiversityError> {
    let mut entropy = 0.0;
    for &lambda in eigenvalues {
        if lambda < -NEGATIVE_EIGEN_TOLERANCE {
            return Err(DiversityError::InvalidKernel(format!("negative eigenvalue {lambda}")));
        }
        if lambda > EIGEN_CLAMP {
            entropy -= lambda * lambda.ln();
        }
    }
    Ok(entropy.exp().clamp(1.0, n as f64))
}
