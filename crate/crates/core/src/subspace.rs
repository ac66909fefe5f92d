//! Overlap between retain and forget adapters: per-layer eigenbasis
//! similarity of the merged updates and an orthogonality penalty.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{AdapterDelta, LowRankPair};
use crate::numerics::{dot, topk_left_singular, DenseMatrix, NumericsError};

pub const DEFAULT_TOP_K: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SubspaceError {
    #[error("invalid rank: requested k = {requested}, at most {available} available")]
    InvalidRank { requested: usize, available: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("the two adapters share no layers")]
    NoSharedLayers,
    #[error(transparent)]
    Numerics(NumericsError),
}

impl From<NumericsError> for SubspaceError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::InvalidRank { requested, available } => SubspaceError::InvalidRank { requested, available },
            NumericsError::InvalidMatrix(m) => SubspaceError::ShapeMismatch(m),
            other => SubspaceError::Numerics(other),
        }
    }
}

/// `W = scale · B · A`.
pub fn merged_update(pair: &LowRankPair) -> DenseMatrix {
    pair.delta()
}

/// `(1/k)·‖U₁ᵀU₂‖_F` over the top-`k` left singular vectors, optionally
/// multiplied by `√k` so identical subspaces score 1.
pub fn eigenbasis_similarity(
    w1: &DenseMatrix,
    w2: &DenseMatrix,
    k: usize,
    normalized: bool,
) -> Result<f64, SubspaceError> {
    if w1.rows() != w2.rows() {
        return Err(SubspaceError::ShapeMismatch(format!(
            "updates have {} and {} output rows",
            w1.rows(),
            w2.rows()
        )));
    }
    let u1 = topk_left_singular(w1, k)?;
    let u2 = topk_left_singular(w2, k)?;
    let cross = u1.transpose().matmul(&u2)?;
    let raw = cross.frobenius_norm() / k as f64;
    Ok(if normalized { raw * (k as f64).sqrt() } else { raw })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub k: usize,
    pub normalized: bool,
    pub per_layer: BTreeMap<String, f64>,
    pub mean: f64,
    pub std: f64,
}

impl SimilarityReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Per-layer similarity over the shared layers with mean and population std.
pub fn report(
    retain: &AdapterDelta,
    forget: &AdapterDelta,
    k: usize,
    normalized: bool,
) -> Result<SimilarityReport, SubspaceError> {
    let mut per_layer = BTreeMap::new();
    for (name, r) in &retain.layers {
        if let Some(f) = forget.layers.get(name) {
            let sim = eigenbasis_similarity(&merged_update(r), &merged_update(f), k, normalized)?;
            per_layer.insert(name.clone(), sim);
        }
    }
    if per_layer.is_empty() {
        return Err(SubspaceError::NoSharedLayers);
    }
    let n = per_layer.len() as f64;
    let mean = per_layer.values().sum::<f64>() / n;
    let var = per_layer.values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(SimilarityReport { k, normalized, per_layer, mean, std: var.sqrt() })
}

/// `Σ_layers Σ_ij |(A_retain · A_forgetᵀ)_ij|` over shared layers.
pub fn ortho_penalty(retain: &AdapterDelta, forget: &AdapterDelta) -> Result<f64, SubspaceError> {
    let mut total = 0.0;
    let mut shared = 0;
    for (name, r) in &retain.layers {
        let Some(f) = forget.layers.get(name) else { continue };
        shared += 1;
        if r.d_in() != f.d_in() {
            return Err(SubspaceError::ShapeMismatch(format!(
                "layer {name}: A widths {} and {} differ",
                r.d_in(),
                f.d_in()
            )));
        }
        for i in 0..r.rank() {
            for j in 0..f.rank() {
                total += dot(r.a().row(i), f.a().row(j)).abs();
            }
        }
    }
    if shared == 0 {
        return Err(SubspaceError::NoSharedLayers);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_block(d: usize, cols: std::ops::Range<usize>) -> DenseMatrix {
        DenseMatrix::from_fn(d, d, |i, j| if i == j && cols.contains(&i) { 1.0 + i as f64 } else { 0.0 })
    }

    #[test]
    fn padded_identity_pair() {
        let a = DenseMatrix::from_fn(2, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let b = DenseMatrix::from_fn(4, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        let w = merged_update(&LowRankPair::new(a, b, 0.5).unwrap());
        let expected = DenseMatrix::from_fn(4, 3, |i, j| if i == j && i < 2 { 0.5 } else { 0.0 });
        assert_eq!(w, expected);
    }

    #[test]
    fn rank_one_outer_product() {
        let a = DenseMatrix::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![3.0], vec![0.25]]).unwrap();
        let w = merged_update(&LowRankPair::new(a, b, 2.0).unwrap());
        assert_eq!(w.as_slice(), &[6.0, -12.0, 3.0, 0.5, -1.0, 0.25]);
    }

    #[test]
    fn identical_subspaces() {
        let w = DenseMatrix::from_fn(10, 10, |i, j| if i == j { 10.0 - i as f64 } else { 0.1 * (i + j) as f64 });
        let raw = eigenbasis_similarity(&w, &w, 8, false).unwrap();
        assert!((raw - 1.0 / 8f64.sqrt()).abs() < 1e-10);
        let normalized = eigenbasis_similarity(&w, &w, 8, true).unwrap();
        assert!((normalized - 1.0).abs() < 1e-10);
    }

    #[test]
    fn disjoint_axis_spans_are_orthogonal() {
        let w1 = axis_block(8, 0..4);
        let w2 = axis_block(8, 4..8);
        assert!(eigenbasis_similarity(&w1, &w2, 4, false).unwrap().abs() < 1e-12);
    }

    #[test]
    fn k_out_of_range() {
        let w = DenseMatrix::identity(4);
        assert!(matches!(eigenbasis_similarity(&w, &w, 5, false), Err(SubspaceError::InvalidRank { .. })));
        assert!(matches!(eigenbasis_similarity(&w, &w, 0, false), Err(SubspaceError::InvalidRank { .. })));
    }

    fn single_layer(name: &str, a: DenseMatrix, b: DenseMatrix) -> AdapterDelta {
        AdapterDelta::new(name).with_layer("l", LowRankPair::new(a, b, 1.0).unwrap())
    }

    #[test]
    fn single_shared_layer_report() {
        let a = DenseMatrix::from_fn(2, 4, |i, j| if i == j { 1.0 } else { 0.0 });
        let b = DenseMatrix::from_fn(4, 2, |i, j| if i == j { 1.0 } else { 0.5 });
        let r = single_layer("r", a.clone(), b.clone());
        let f = single_layer("f", a, b);
        let rep = report(&r, &f, 2, false).unwrap();
        assert_eq!(rep.per_layer.len(), 1);
        assert_eq!(rep.mean, rep.per_layer["l"]);
        assert_eq!(rep.std, 0.0);
    }

    #[test]
    fn no_shared_layers() {
        let r = AdapterDelta::new("r");
        let f = AdapterDelta::new("f");
        assert_eq!(report(&r, &f, 1, false), Err(SubspaceError::NoSharedLayers));
        assert_eq!(ortho_penalty(&r, &f), Err(SubspaceError::NoSharedLayers));
    }

    #[test]
    fn penalty_identical_and_orthogonal_rows() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0, 0.0, 0.0], vec![0.0, -1.0, 1.0, 0.0]]).unwrap();
        let b = DenseMatrix::zeros(3, 2);
        let same = ortho_penalty(&single_layer("r", a.clone(), b.clone()), &single_layer("f", a.clone(), b.clone())).unwrap();
        // A·Aᵀ = [[5, -2], [-2, 2]]
        assert_eq!(same, 11.0);
        let other = DenseMatrix::from_rows(&[vec![0.0, 0.0, 0.0, 3.0]]).unwrap();
        let ortho = ortho_penalty(&single_layer("r", a, b), &single_layer("f", other, DenseMatrix::zeros(3, 1))).unwrap();
        assert_eq!(ortho, 0.0);
    }

    #[test]
    fn report_json_fields() {
        let a = DenseMatrix::from_fn(1, 3, |_, j| j as f64 + 1.0);
        let b = DenseMatrix::from_fn(3, 1, |i, _| i as f64 - 1.0);
        let rep = report(&single_layer("r", a.clone(), b.clone()), &single_layer("f", a, b), 1, true).unwrap();
        let v: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, vec!["k", "mean", "normalized", "per_layer", "std"]);
    }
}
