//! Per-run manifest: command, seed, configuration snapshot and a hash of
//! every artifact the run wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Path relative to the output directory (with `/` separators) → sha256.
    pub artifacts: BTreeMap<String, String>,
}

pub fn manifest_path(out_dir: &Path, command: &str) -> PathBuf {
    out_dir.join(format!("{command}.manifest.json"))
}

fn relative(out_dir: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(out_dir).unwrap_or(path);
    rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

/// Every regular file under `path` (or `path` itself).
fn collect(path: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    if path.is_dir() {
        for entry in fs::read_dir(path).map_err(CliError::io(path))? {
            collect(&entry.map_err(CliError::io(path))?.path(), out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Hashes `artifacts` (files or directories) and writes the manifest.
pub fn write_manifest(
    out_dir: &Path,
    command: &str,
    seed: u64,
    config: serde_json::Value,
    artifacts: &[PathBuf],
) -> Result<PathBuf, CliError> {
    let mut files = Vec::new();
    for a in artifacts {
        collect(a, &mut files)?;
    }
    let mut hashes = BTreeMap::new();
    for f in files {
        hashes.insert(relative(out_dir, &f), sha256_file(&f)?);
    }
    let manifest = RunManifest {
        manifest_version: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        seed,
        config,
        artifacts: hashes,
    };
    let path = manifest_path(out_dir, command);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(CliError::io(&path))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Re-hashes the listed artifacts; returns the paths whose contents changed.
pub fn verify_manifest(out_dir: &Path, manifest: &RunManifest) -> Result<Vec<String>, CliError> {
    let mut changed = Vec::new();
    for (rel, expected) in &manifest.artifacts {
        let path = out_dir.join(rel);
        if !path.exists() || &sha256_file(&path)? != expected {
            changed.push(rel.clone());
        }
    }
    Ok(changed)
}
