//! Client interfaces for the external capabilities the pipeline consumes:
//! instruction rendering, generation, embedding, relevance scoring, adapter
//! training and trade-off evaluation. Each has a seeded in-process mock and
//! an HTTP client speaking a small JSON protocol.

#[cfg(feature = "http")]
mod http;
mod mock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adapters::{AdapterDelta, AdapterError, WeightState};
use crate::diversity::EmbeddingSet;
use crate::unlearn::TradeoffPoint;

#[cfg(feature = "http")]
pub use http::{HttpClient, TrainResponse};
pub(crate) use mock::{check_responses, sample_tokens};
pub use mock::{
    instruction_fixtures, HashingEmbedder, MockGenerator, MockRenderer, TargetVocabRelevance, MOCK_EMBED_DIM,
};

/// Environment variables that override configured endpoints.
pub const ENDPOINT_ENV_VARS: [(Capability, &str); 6] = [
    (Capability::Render, "RR_RENDER_URL"),
    (Capability::Generate, "RR_GEN_URL"),
    (Capability::Embed, "RR_EMBED_URL"),
    (Capability::Score, "RR_SCORE_URL"),
    (Capability::Train, "RR_TRAIN_URL"),
    (Capability::Evaluate, "RR_EVAL_URL"),
];

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend timed out: {0}")]
    Timeout(String),
    #[error("generation returned only empty responses")]
    EmptyGeneration,
    #[error("trainer failure: {0}")]
    TrainerFailure(String),
    #[error("invalid backend response: {0}")]
    InvalidResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

impl BackendError {
    pub fn kind(&self) -> &'static str {
        match self {
            BackendError::BackendUnavailable(_) => "BackendUnavailable",
            BackendError::Timeout(_) => "Timeout",
            BackendError::EmptyGeneration => "EmptyGeneration",
            BackendError::TrainerFailure(_) => "TrainerFailure",
            BackendError::InvalidResponse(_) => "InvalidResponse",
            BackendError::InvalidRequest(_) => "InvalidRequest",
            BackendError::Adapter(e) => e.kind(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Render,
    Generate,
    Embed,
    Score,
    Train,
    Evaluate,
}

impl Capability {
    pub fn path(self) -> &'static str {
        match self {
            Capability::Render => "/render",
            Capability::Generate => "/generate",
            Capability::Embed => "/embed",
            Capability::Score => "/score",
            Capability::Train => "/train",
            Capability::Evaluate => "/evaluate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Passed through as `Authorization: Bearer …`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bearer_token: Option<String>,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_max_in_flight() -> usize {
    4
}
fn default_retries() -> u32 {
    2
}
fn default_backoff_ms() -> u64 {
    250
}

impl BackendConfig {
    pub fn mock(seed: u64) -> Self {
        Self::local(BackendKind::Mock, seed)
    }

    pub fn toy(seed: u64) -> Self {
        Self::local(BackendKind::Toy, seed)
    }

    fn local(kind: BackendKind, seed: u64) -> Self {
        Self {
            kind,
            endpoint: None,
            timeout_ms: default_timeout_ms(),
            max_in_flight: default_max_in_flight(),
            seed: Some(seed),
            bearer_token: None,
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
        }
    }

    pub fn http(endpoint: impl Into<String>) -> Self {
        Self { kind: BackendKind::Http, endpoint: Some(endpoint.into()), seed: None, ..Self::mock(0) }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.kind {
            BackendKind::Http if self.endpoint.as_deref().is_none_or(str::is_empty) => {
                Err("http backends need an endpoint".into())
            }
            BackendKind::Mock | BackendKind::Toy if self.seed.is_none() => Err("mock and toy backends need a seed".into()),
            _ if self.max_in_flight == 0 => Err("max_in_flight must be at least 1".into()),
            _ if self.timeout_ms == 0 => Err("timeout_ms must be positive".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodingParams {
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub samples: usize,
}

impl DecodingParams {
    /// Toxicity-evaluation profile: 25 nucleus-sampled continuations of at most 20 tokens.
    pub fn toxicity_eval() -> Self {
        Self { max_tokens: 20, temperature: 1.0, top_p: 0.9, samples: 25 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.samples == 0 {
            return Err("samples must be at least 1".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p {} outside (0, 1]", self.top_p));
        }
        Ok(())
    }
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self { max_tokens: 12, temperature: 1.0, top_p: 0.9, samples: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    ForgetFit,
    RetainFit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub rank: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { rank: 4, steps: 200, lr: 0.05 }
    }
}

pub trait InstructionRenderer: Send + Sync {
    fn render_instruction(&self, z: &[f64]) -> Result<String, BackendError>;
}

pub trait Generator: Send + Sync {
    fn generate(&self, context: &str, instruction: &str, params: &DecodingParams) -> Result<Vec<String>, BackendError>;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<EmbeddingSet, BackendError>;
}

pub trait RelevanceOracle: Send + Sync {
    fn relevance(&self, texts: &[String]) -> Result<Vec<f64>, BackendError>;
}

pub trait Trainer: Send + Sync {
    /// Trains a fresh adapter on top of `plan`. `dataset` is an opaque
    /// reference understood by the trainer.
    fn train_adapter(
        &self,
        plan: &WeightState,
        dataset: &str,
        objective: Objective,
        hyper: &TrainHyper,
    ) -> Result<AdapterDelta, BackendError>;
}

pub trait Evaluator: Send + Sync {
    fn evaluate(&self, plan: &WeightState) -> Result<TradeoffPoint, BackendError>;
}

/// Stable 64-bit hash of a seed and byte strings; identical across platforms
/// and releases.
pub fn stable_hash(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|t| t.trim_matches(|c: char| !c.is_alphanumeric() && c != '_').to_lowercase())
        .filter(|t| !t.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_invariants() {
        assert!(BackendConfig::mock(1).validate().is_ok());
        let mut no_seed = BackendConfig::mock(1);
        no_seed.seed = None;
        assert!(no_seed.validate().is_err());
        let mut no_endpoint = BackendConfig::http("http://x");
        no_endpoint.endpoint = None;
        assert!(no_endpoint.validate().is_err());
        assert!(BackendConfig::http("http://localhost:1").validate().is_ok());
    }

    #[test]
    fn decoding_invariants() {
        assert!(DecodingParams::default().validate().is_ok());
        let p = DecodingParams::toxicity_eval();
        assert_eq!((p.samples, p.max_tokens), (25, 20));
        assert!(DecodingParams { samples: 0, ..p.clone() }.validate().is_err());
        assert!(DecodingParams { top_p: 0.0, ..p }.validate().is_err());
    }

    #[test]
    fn stable_hash_is_stable() {
        assert_eq!(stable_hash(7, &[b"abc"]), stable_hash(7, &[b"abc"]));
        assert_ne!(stable_hash(7, &[b"abc"]), stable_hash(8, &[b"abc"]));
        assert_ne!(stable_hash(7, &[b"ab", b"c"]), stable_hash(7, &[b"a", b"bc"]));
    }

    #[test]
    fn tokenizer_strips_punctuation() {
        let toks: Vec<String> = tokenize("Hello, World!  it's_ok ...").collect();
        assert_eq!(toks, vec!["hello", "world", "it's_ok"]);
    }
}
