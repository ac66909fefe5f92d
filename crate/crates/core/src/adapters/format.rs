//! Adapter directories (`manifest.json` + `tensors.bin`) and merge-plan JSON.
//!
//! Tensors are little-endian IEEE-754 float32, row-major, A then B for each
//! layer at the byte offsets recorded in the manifest. The manifest carries
//! the SHA-256 of the whole blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdapterDelta, AdapterError, LowRankPair, Sign, Term, WeightState};
use crate::numerics::DenseMatrix;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub scale: f64,
    pub a_offset: u64,
    pub a_len: u64,
    pub b_offset: u64,
    pub b_len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterManifest {
    pub format_version: u32,
    pub name: String,
    pub sha256: String,
    pub layers: Vec<LayerEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AdapterError + '_ {
    move |source| AdapterError::Io { path: path.to_path_buf(), source }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn push_f32(blob: &mut Vec<u8>, m: &DenseMatrix) {
    for &v in m.as_slice() {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Writes `delta` as an adapter directory, creating it if needed. Values are
/// stored as float32.
pub fn write_adapter(delta: &AdapterDelta, dir: &Path) -> Result<AdapterManifest, AdapterError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut blob = Vec::new();
    let mut layers = Vec::with_capacity(delta.layers.len());
    for (name, pair) in &delta.layers {
        let a_offset = blob.len() as u64;
        push_f32(&mut blob, pair.a());
        let b_offset = blob.len() as u64;
        push_f32(&mut blob, pair.b());
        layers.push(LayerEntry {
            name: name.clone(),
            d_in: pair.d_in(),
            d_out: pair.d_out(),
            rank: pair.rank(),
            scale: pair.scale(),
            a_offset,
            a_len: b_offset - a_offset,
            b_offset,
            b_len: blob.len() as u64 - b_offset,
        });
    }
    let manifest =
        AdapterManifest { format_version: FORMAT_VERSION, name: delta.name.clone(), sha256: sha256_hex(&blob), layers };
    let tensors = dir.join(TENSORS_FILE);
    fs::write(&tensors, &blob).map_err(io_err(&tensors))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

fn read_matrix(blob: &[u8], offset: u64, len: u64, rows: usize, cols: usize, what: &str) -> Result<DenseMatrix, AdapterError> {
    let expected = (rows * cols * 4) as u64;
    if len != expected {
        return Err(AdapterError::CorruptManifest(format!("{what}: length {len} bytes, expected {expected}")));
    }
    let end = offset
        .checked_add(len)
        .ok_or_else(|| AdapterError::CorruptManifest(format!("{what}: offset overflow")))?;
    if end > blob.len() as u64 {
        return Err(AdapterError::TruncatedBlob { needed: end, found: blob.len() as u64 });
    }
    let bytes = &blob[offset as usize..end as usize];
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    DenseMatrix::new(rows, cols, data).map_err(|e| AdapterError::CorruptManifest(format!("{what}: {e}")))
}

pub fn read_manifest(dir: &Path) -> Result<AdapterManifest, AdapterError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: AdapterManifest =
        serde_json::from_str(&text).map_err(|e| AdapterError::CorruptManifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(AdapterError::CorruptManifest(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Reads an adapter directory, checking bounds before the checksum so a
/// short blob reports as truncated.
pub fn read_adapter(dir: &Path) -> Result<AdapterDelta, AdapterError> {
    let manifest = read_manifest(dir)?;
    let tensors = dir.join(TENSORS_FILE);
    let blob = fs::read(&tensors).map_err(io_err(&tensors))?;

    let needed = manifest
        .layers
        .iter()
        .flat_map(|l| [l.a_offset.saturating_add(l.a_len), l.b_offset.saturating_add(l.b_len)])
        .max()
        .unwrap_or(0);
    if needed > blob.len() as u64 {
        return Err(AdapterError::TruncatedBlob { needed, found: blob.len() as u64 });
    }
    let actual = sha256_hex(&blob);
    if !actual.eq_ignore_ascii_case(&manifest.sha256) {
        return Err(AdapterError::ChecksumMismatch { expected: manifest.sha256, actual });
    }

    let mut delta = AdapterDelta::new(manifest.name.clone());
    for l in &manifest.layers {
        if delta.layers.contains_key(&l.name) {
            return Err(AdapterError::CorruptManifest(format!("duplicate layer {}", l.name)));
        }
        let a = read_matrix(&blob, l.a_offset, l.a_len, l.rank, l.d_in, &format!("{}.a", l.name))?;
        let b = read_matrix(&blob, l.b_offset, l.b_len, l.d_out, l.rank, &format!("{}.b", l.name))?;
        let pair = LowRankPair::new(a, b, l.scale).map_err(|e| AdapterError::CorruptManifest(e.to_string()))?;
        delta.layers.insert(l.name.clone(), pair);
    }
    Ok(delta)
}

/// `{base_ref, terms: [{sign, weight, adapter_path}]}` with `sign` as ±1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergePlan {
    pub base_ref: String,
    pub terms: Vec<PlanTerm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanTerm {
    pub sign: i8,
    pub weight: f64,
    pub adapter_path: PathBuf,
}

impl MergePlan {
    /// Plan referencing each term's adapter directory; every term needs a source.
    pub fn from_state(state: &WeightState) -> Result<Self, AdapterError> {
        let terms = state
            .terms()
            .iter()
            .map(|t| {
                let path = t.source.clone().ok_or_else(|| AdapterError::MissingSource(t.delta.name.clone()))?;
                Ok(PlanTerm {
                    sign: match t.sign {
                        Sign::Plus => 1,
                        Sign::Minus => -1,
                    },
                    weight: t.weight,
                    adapter_path: path,
                })
            })
            .collect::<Result<_, AdapterError>>()?;
        Ok(Self { base_ref: state.base_ref.clone(), terms })
    }

    /// Loads every referenced adapter, resolving relative paths against `root`.
    pub fn load_terms(&self, root: &Path) -> Result<Vec<Term>, AdapterError> {
        let mut cache: BTreeMap<PathBuf, Arc<AdapterDelta>> = BTreeMap::new();
        self.terms
            .iter()
            .map(|t| {
                let sign = match t.sign {
                    1 => Sign::Plus,
                    -1 => Sign::Minus,
                    other => return Err(AdapterError::InvalidTerm(format!("sign must be 1 or -1, got {other}"))),
                };
                let path = if t.adapter_path.is_absolute() { t.adapter_path.clone() } else { root.join(&t.adapter_path) };
                let delta = match cache.get(&path) {
                    Some(d) => d.clone(),
                    None => {
                        let d = Arc::new(read_adapter(&path)?);
                        cache.insert(path.clone(), d.clone());
                        d
                    }
                };
                Ok(Term { sign, weight: t.weight, delta, source: Some(t.adapter_path.clone()) })
            })
            .collect()
    }
}

pub fn write_merge_plan(plan: &MergePlan, path: &Path) -> Result<(), AdapterError> {
    let mut json = serde_json::to_string_pretty(plan).expect("plan serializes");
    json.push('\n');
    fs::write(path, json).map_err(io_err(path))
}

pub fn read_merge_plan(path: &Path) -> Result<MergePlan, AdapterError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| AdapterError::CorruptManifest(format!("merge plan: {e}")))
}
