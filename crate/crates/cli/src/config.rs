//! The single JSON run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rr_core::backends::{BackendConfig, BackendKind, Capability, ENDPOINT_ENV_VARS};
use rr_core::datagen::GenConfig;
use rr_core::toyenv::{FORGET_REF, RETAIN_REF};
use rr_core::unlearn::UnlearnConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

const CAPABILITIES: [Capability; 6] = [
    Capability::Render,
    Capability::Generate,
    Capability::Embed,
    Capability::Score,
    Capability::Train,
    Capability::Evaluate,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSettings {
    /// JSON map `layer → [d_out, d_in]` that trained adapters must match.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<PathBuf>,
    /// Name of the frozen base model passed to HTTP backends.
    #[serde(default = "default_base_ref")]
    pub base_ref: String,
}

fn default_base_ref() -> String {
    "base".into()
}

impl Default for AdapterSettings {
    fn default() -> Self {
        Self { signature: None, base_ref: default_base_ref() }
    }
}

/// References the trainer receives for the two objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRefs {
    #[serde(default = "default_forget")]
    pub forget: String,
    #[serde(default = "default_retain")]
    pub retain: String,
}

fn default_forget() -> String {
    FORGET_REF.into()
}
fn default_retain() -> String {
    RETAIN_REF.into()
}

impl Default for DatasetRefs {
    fn default() -> Self {
        Self { forget: default_forget(), retain: default_retain() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Capabilities left out use the toy backend.
    #[serde(default)]
    pub backends: BTreeMap<Capability, BackendConfig>,
    #[serde(default)]
    pub datagen: GenConfig,
    #[serde(default)]
    pub unlearn: UnlearnConfig,
    #[serde(default)]
    pub adapters: AdapterSettings,
    #[serde(default)]
    pub datasets: DatasetRefs,
    /// Text file with one generation context per line; the toy contexts
    /// are used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contexts: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config parses")
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{}: {}", if path == "." { "<root>".into() } else { path }, e.into_inner()))
        })?;
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        // Relative paths inside the file are relative to the file.
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.contexts, &mut cfg.adapters.signature].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        cfg.check_paths()?;
        Ok(cfg)
    }

    /// Endpoint variables switch the capability to the HTTP backend.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) {
        for (cap, name) in ENDPOINT_ENV_VARS {
            if let Some(url) = var(name).filter(|u| !u.is_empty()) {
                let entry = self.backends.entry(cap).or_insert_with(|| BackendConfig::http(url.clone()));
                entry.kind = BackendKind::Http;
                entry.endpoint = Some(url);
            }
        }
    }

    pub fn backend(&self, cap: Capability) -> BackendConfig {
        self.backends.get(&cap).cloned().unwrap_or_else(|| BackendConfig::toy(self.seed))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for cap in CAPABILITIES {
            self.backend(cap).validate().map_err(|e| CliError::Config(format!("backends.{}: {e}", cap_name(cap))))?;
        }
        self.datagen.validate().map_err(|e| CliError::Config(format!("datagen: {e}")))?;
        self.unlearn.rule.validate().map_err(|e| CliError::Config(format!("unlearn: {e}")))?;
        if self.unlearn.hyper.rank == 0 || self.unlearn.hyper.steps == 0 || !(self.unlearn.hyper.lr > 0.0) {
            return Err(CliError::Config("unlearn.hyper: rank, steps and lr must be positive".into()));
        }
        Ok(())
    }

    pub fn check_paths(&self) -> Result<(), CliError> {
        for (key, p) in [("contexts", &self.contexts), ("adapters.signature", &self.adapters.signature)] {
            if let Some(p) = p.as_ref().filter(|p| !p.exists()) {
                return Err(CliError::Config(format!("{key}: {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// The configuration as recorded in run manifests: output location
    /// dropped so replays in other directories compare equal.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.output_dir = None;
        serde_json::to_value(c).expect("config serializes")
    }
}

pub fn cap_name(cap: Capability) -> &'static str {
    &cap.path()[1..]
}
