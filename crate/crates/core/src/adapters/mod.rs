//! Low-rank adapters and their signed, weighted composition onto a frozen
//! base model: `Φ = Φ₀ − μ₀ΔF₀ + Σᵢ (λᵢΔRᵢ − μᵢΔFᵢ)`.

mod format;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{DenseMatrix, NumericsError};

pub use format::{
    read_adapter, read_manifest, read_merge_plan, write_adapter, write_merge_plan, AdapterManifest, LayerEntry, MergePlan,
    PlanTerm, FORMAT_VERSION, MANIFEST_FILE, TENSORS_FILE,
};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("shape mismatch in layer {layer}: {detail}")]
    ShapeMismatch { layer: String, detail: String },
    #[error("unknown layer {0}")]
    UnknownLayer(String),
    #[error("invalid term: {0}")]
    InvalidTerm(String),
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("checksum mismatch: manifest says {expected}, blob hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("truncated blob: need {needed} bytes, found {found}")]
    TruncatedBlob { needed: u64, found: u64 },
    #[error("adapter term has no on-disk source: {0}")]
    MissingSource(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AdapterError {
    pub fn kind(&self) -> &'static str {
        match self {
            AdapterError::ShapeMismatch { .. } => "ShapeMismatch",
            AdapterError::UnknownLayer(_) => "UnknownLayer",
            AdapterError::InvalidTerm(_) => "InvalidTerm",
            AdapterError::CorruptManifest(_) => "CorruptManifest",
            AdapterError::ChecksumMismatch { .. } => "ChecksumMismatch",
            AdapterError::TruncatedBlob { .. } => "TruncatedBlob",
            AdapterError::MissingSource(_) => "MissingSource",
            AdapterError::Io { .. } => "IoError",
        }
    }
}

impl From<NumericsError> for AdapterError {
    fn from(e: NumericsError) -> Self {
        AdapterError::ShapeMismatch { layer: String::new(), detail: e.to_string() }
    }
}

/// `ΔW = scale · B · A` with `A: rank × d_in` and `B: d_out × rank`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankPair {
    a: DenseMatrix,
    b: DenseMatrix,
    scale: f64,
}

impl LowRankPair {
    pub fn new(a: DenseMatrix, b: DenseMatrix, scale: f64) -> Result<Self, AdapterError> {
        if b.cols() != a.rows() {
            return Err(AdapterError::ShapeMismatch {
                layer: String::new(),
                detail: format!("B is {}x{} but A is {}x{}", b.rows(), b.cols(), a.rows(), a.cols()),
            });
        }
        if !scale.is_finite() {
            return Err(AdapterError::InvalidTerm(format!("non-finite scale {scale}")));
        }
        Ok(Self { a, b, scale })
    }

    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn b(&self) -> &DenseMatrix {
        &self.b
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    /// Dense `scale · B · A`.
    pub fn delta(&self) -> DenseMatrix {
        let ba = self.b.matmul(&self.a).expect("pair shapes checked at construction");
        if self.scale == 1.0 {
            ba
        } else {
            ba.scaled(self.scale)
        }
    }
}

/// Named collection of per-layer low-rank updates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterDelta {
    pub name: String,
    pub layers: BTreeMap<String, LowRankPair>,
}

impl AdapterDelta {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), layers: BTreeMap::new() }
    }

    pub fn with_layer(mut self, layer: impl Into<String>, pair: LowRankPair) -> Self {
        self.layers.insert(layer.into(), pair);
        self
    }
}

/// Layer name → `(d_out, d_in)` for every mergeable layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelSignature {
    layers: BTreeMap<String, (usize, usize)>,
}

impl ModelSignature {
    pub fn new(layers: BTreeMap<String, (usize, usize)>) -> Result<Self, AdapterError> {
        if layers.is_empty() {
            return Err(AdapterError::InvalidTerm("model signature has no layers".into()));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &BTreeMap<String, (usize, usize)> {
        &self.layers
    }

    pub fn shape(&self, layer: &str) -> Option<(usize, usize)> {
        self.layers.get(layer).copied()
    }
}

/// Checks every layer of `delta` against the signature. Layers the delta does
/// not mention are implicit zero updates.
pub fn validate(delta: &AdapterDelta, sig: &ModelSignature) -> Result<(), AdapterError> {
    for (name, pair) in &delta.layers {
        let (d_out, d_in) = sig.shape(name).ok_or_else(|| AdapterError::UnknownLayer(name.clone()))?;
        if pair.d_out() != d_out || pair.d_in() != d_in {
            return Err(AdapterError::ShapeMismatch {
                layer: name.clone(),
                detail: format!(
                    "update is {}x{} (rank {}), signature expects {d_out}x{d_in}",
                    pair.d_out(),
                    pair.d_in(),
                    pair.rank()
                ),
            });
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn factor(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// One `±weight · Δ` entry of a composition.
#[derive(Clone, Debug)]
pub struct Term {
    pub sign: Sign,
    pub weight: f64,
    pub delta: Arc<AdapterDelta>,
    /// Adapter directory this delta was read from or persisted to.
    pub source: Option<PathBuf>,
}

impl Term {
    pub fn new(sign: Sign, weight: f64, delta: Arc<AdapterDelta>) -> Self {
        Self { sign, weight, delta, source: None }
    }

    pub fn with_source(mut self, path: impl Into<PathBuf>) -> Self {
        self.source = Some(path.into());
        self
    }

    pub fn coefficient(&self) -> f64 {
        self.sign.factor() * self.weight
    }
}

/// Frozen base plus an ordered list of signed weighted adapter terms.
#[derive(Clone, Debug)]
pub struct WeightState {
    pub base_ref: String,
    signature: ModelSignature,
    terms: Vec<Term>,
    pub iteration: usize,
}

impl WeightState {
    pub fn base(base_ref: impl Into<String>, signature: ModelSignature) -> Self {
        Self { base_ref: base_ref.into(), signature, terms: Vec::new(), iteration: 0 }
    }

    pub fn signature(&self) -> &ModelSignature {
        &self.signature
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Returns a new state with `term` appended.
    pub fn with_term(&self, term: Term) -> Result<Self, AdapterError> {
        check_term(&term, &self.signature)?;
        let mut next = self.clone();
        next.terms.push(term);
        Ok(next)
    }

    /// Dense weights for `layer`: `base + Σ sign·weight·scale·B·A`, accumulated
    /// in term order. Zero-coefficient terms are skipped, so they leave the
    /// base bitwise untouched.
    pub fn materialize(&self, layer: &str, base_weights: &DenseMatrix) -> Result<DenseMatrix, AdapterError> {
        let (d_out, d_in) = self.signature.shape(layer).ok_or_else(|| AdapterError::UnknownLayer(layer.into()))?;
        if base_weights.shape() != (d_out, d_in) {
            return Err(AdapterError::ShapeMismatch {
                layer: layer.into(),
                detail: format!("base weights are {:?}, signature expects {:?}", base_weights.shape(), (d_out, d_in)),
            });
        }
        let mut w = base_weights.clone();
        for term in &self.terms {
            let coefficient = term.coefficient();
            if coefficient == 0.0 {
                continue;
            }
            if let Some(pair) = term.delta.layers.get(layer) {
                w.add_scaled(coefficient, &pair.delta())?;
            }
        }
        Ok(w)
    }

    /// Materializes every layer of the signature against `base`.
    pub fn materialize_all(
        &self,
        base: &BTreeMap<String, DenseMatrix>,
    ) -> Result<BTreeMap<String, DenseMatrix>, AdapterError> {
        self.signature
            .layers()
            .keys()
            .map(|name| {
                let b = base.get(name).ok_or_else(|| AdapterError::UnknownLayer(name.clone()))?;
                Ok((name.clone(), self.materialize(name, b)?))
            })
            .collect()
    }
}

fn check_term(term: &Term, sig: &ModelSignature) -> Result<(), AdapterError> {
    if !term.weight.is_finite() || term.weight < 0.0 {
        return Err(AdapterError::InvalidTerm(format!("weight {} must be finite and non-negative", term.weight)));
    }
    validate(&term.delta, sig)
}

/// Records `Φ₀ ± wᵢΔᵢ …` symbolically after validating every term.
pub fn compose(
    base_ref: impl Into<String>,
    signature: &ModelSignature,
    terms: Vec<Term>,
) -> Result<WeightState, AdapterError> {
    for term in &terms {
        check_term(term, signature)?;
    }
    Ok(WeightState { base_ref: base_ref.into(), signature: signature.clone(), terms, iteration: 0 })
}
