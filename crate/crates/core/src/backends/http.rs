//! JSON-over-HTTP client. One client talks to one endpoint; request and
//! response field names follow the trait method signatures.

use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use ureq::Agent;

use super::{
    BackendConfig, BackendError, Capability, DecodingParams, Embedder, Evaluator, Generator, InstructionRenderer,
    Objective, RelevanceOracle, TrainHyper, Trainer,
};
use crate::adapters::{read_adapter, read_manifest, AdapterDelta, AdapterError, MergePlan, WeightState};
use crate::adapters::{MANIFEST_FILE, TENSORS_FILE};
use crate::diversity::EmbeddingSet;
use crate::unlearn::TradeoffPoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub adapter_url: String,
    pub sha256: String,
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

impl Slots {
    fn acquire(&self, timeout: Duration) -> Result<SlotGuard<'_>, BackendError> {
        let guard = self.free.lock().unwrap_or_else(|e| e.into_inner());
        let (mut free, res) = self
            .cv
            .wait_timeout_while(guard, timeout, |free| *free == 0)
            .unwrap_or_else(|e| e.into_inner());
        if res.timed_out() && *free == 0 {
            return Err(BackendError::Timeout("waiting for a request slot".into()));
        }
        *free -= 1;
        Ok(SlotGuard(self))
    }
}

enum Attempt {
    Retryable(BackendError),
    Fatal(BackendError),
}

#[derive(Debug)]
pub struct HttpClient {
    endpoint: String,
    config: BackendConfig,
    agent: Agent,
    slots: Slots,
    cache_dir: PathBuf,
}

impl HttpClient {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate().map_err(BackendError::InvalidRequest)?;
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| BackendError::InvalidRequest("http backends need an endpoint".into()))?
            .trim_end_matches('/')
            .to_string();
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let slots = Slots { free: Mutex::new(config.max_in_flight), cv: Condvar::new() };
        let cache_dir = std::env::temp_dir().join("rr-adapters");
        Ok(Self { endpoint, config, agent, slots, cache_dir })
    }

    /// Where downloaded adapters are unpacked.
    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = dir.into();
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn url(&self, capability: Capability) -> String {
        format!("{}{}", self.endpoint, capability.path())
    }

    fn attempt(&self, url: &str, body: &Value) -> Result<Value, Attempt> {
        let mut req = self.agent.post(url);
        if let Some(token) = &self.config.bearer_token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(|e| classify(url, e))?;
        let status = resp.status().as_u16();
        if status >= 500 {
            return Err(Attempt::Retryable(BackendError::BackendUnavailable(format!("{url} returned {status}"))));
        }
        if !(200..300).contains(&status) {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Attempt::Fatal(BackendError::InvalidRequest(format!("{url} returned {status}: {text}"))));
        }
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| Attempt::Fatal(BackendError::InvalidResponse(format!("{url}: {e}"))))
    }

    fn post<T: DeserializeOwned>(&self, capability: Capability, body: Value) -> Result<T, BackendError> {
        let url = self.url(capability);
        let retries = if capability == Capability::Train { 0 } else { self.config.retries };
        let _slot = self.slots.acquire(Duration::from_millis(self.config.timeout_ms))?;
        let mut attempt = 0;
        let value = loop {
            match self.attempt(&url, &body) {
                Ok(v) => break v,
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retryable(e)) if attempt >= retries => {
                    return Err(match e {
                        BackendError::BackendUnavailable(m) => {
                            BackendError::BackendUnavailable(format!("{m} (after {} attempts)", attempt + 1))
                        }
                        other => other,
                    })
                }
                Err(Attempt::Retryable(e)) => {
                    let wait = self.config.backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::warn!("{url}: {e}; retrying in {wait} ms");
                    thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
            }
        };
        serde_json::from_value(value).map_err(|e| BackendError::InvalidResponse(format!("{url}: {e}")))
    }

    fn fetch_adapter(&self, resp: &TrainResponse) -> Result<AdapterDelta, BackendError> {
        let url = resp.adapter_url.as_str();
        let dir = if url.starts_with("http://") || url.starts_with("https://") {
            self.download(url, &resp.sha256)?
        } else {
            PathBuf::from(url.strip_prefix("file://").unwrap_or(url))
        };
        let manifest = read_manifest(&dir)?;
        if manifest.sha256 != resp.sha256 {
            return Err(AdapterError::ChecksumMismatch { expected: resp.sha256.clone(), actual: manifest.sha256 }.into());
        }
        Ok(read_adapter(&dir)?)
    }

    fn download(&self, url: &str, sha: &str) -> Result<PathBuf, BackendError> {
        if sha.is_empty() || !sha.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(BackendError::InvalidResponse(format!("bad adapter sha256 {sha:?}")));
        }
        let dir = self.cache_dir.join(sha);
        std::fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
        for file in [MANIFEST_FILE, TENSORS_FILE] {
            let file_url = format!("{}/{file}", url.trim_end_matches('/'));
            let mut resp = self.agent.get(&file_url).call().map_err(|e| match classify(&file_url, e) {
                Attempt::Retryable(e) | Attempt::Fatal(e) => e,
            })?;
            if resp.status().as_u16() != 200 {
                return Err(BackendError::BackendUnavailable(format!("{file_url} returned {}", resp.status())));
            }
            let bytes = resp
                .body_mut()
                .with_config()
                .limit(1 << 32)
                .read_to_vec()
                .map_err(|e| BackendError::InvalidResponse(format!("{file_url}: {e}")))?;
            let path = dir.join(file);
            std::fs::write(&path, bytes).map_err(|e| io_failure(&path, e))?;
        }
        Ok(dir)
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> BackendError {
    AdapterError::Io { path: path.to_path_buf(), source: e }.into()
}

fn classify(url: &str, e: ureq::Error) -> Attempt {
    match e {
        ureq::Error::Timeout(t) => Attempt::Retryable(BackendError::Timeout(format!("{url}: {t}"))),
        ureq::Error::Io(io) if matches!(io.kind(), ErrorKind::TimedOut | ErrorKind::WouldBlock) => {
            Attempt::Retryable(BackendError::Timeout(format!("{url}: {io}")))
        }
        ureq::Error::BadUri(m) => Attempt::Fatal(BackendError::InvalidRequest(format!("{url}: {m}"))),
        other => Attempt::Fatal(BackendError::BackendUnavailable(format!("{url}: {other}"))),
    }
}

#[derive(Deserialize)]
struct RenderResponse {
    text: String,
}

#[derive(Deserialize)]
struct GenerateResponse {
    texts: Vec<String>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct ScoreResponse {
    scores: Vec<f64>,
}

impl InstructionRenderer for HttpClient {
    fn render_instruction(&self, z: &[f64]) -> Result<String, BackendError> {
        if z.iter().any(|x| !x.is_finite()) {
            return Err(BackendError::InvalidRequest("soft prompt has non-finite entries".into()));
        }
        let r: RenderResponse = self.post(Capability::Render, json!({ "z": z }))?;
        Ok(r.text)
    }
}

impl Generator for HttpClient {
    fn generate(&self, context: &str, instruction: &str, params: &DecodingParams) -> Result<Vec<String>, BackendError> {
        params.validate().map_err(BackendError::InvalidRequest)?;
        let r: GenerateResponse = self.post(
            Capability::Generate,
            json!({ "context": context, "instruction": instruction, "params": params }),
        )?;
        if r.texts.len() != params.samples {
            return Err(BackendError::InvalidResponse(format!(
                "asked for {} samples, got {}",
                params.samples,
                r.texts.len()
            )));
        }
        super::mock::check_responses(r.texts)
    }
}

impl Embedder for HttpClient {
    fn embed(&self, texts: &[String]) -> Result<EmbeddingSet, BackendError> {
        let r: EmbedResponse = self.post(Capability::Embed, json!({ "texts": texts }))?;
        if r.embeddings.len() != texts.len() {
            return Err(BackendError::InvalidResponse("embedding count differs from text count".into()));
        }
        EmbeddingSet::normalized(r.embeddings).map_err(|e| BackendError::InvalidResponse(e.to_string()))
    }
}

impl RelevanceOracle for HttpClient {
    fn relevance(&self, texts: &[String]) -> Result<Vec<f64>, BackendError> {
        let r: ScoreResponse = self.post(Capability::Score, json!({ "texts": texts }))?;
        if r.scores.len() != texts.len() || r.scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(BackendError::InvalidResponse("scores must be one value in [0, 1] per text".into()));
        }
        Ok(r.scores)
    }
}

impl Trainer for HttpClient {
    fn train_adapter(
        &self,
        plan: &WeightState,
        dataset: &str,
        objective: Objective,
        hyper: &TrainHyper,
    ) -> Result<AdapterDelta, BackendError> {
        let plan = MergePlan::from_state(plan)?;
        let resp: TrainResponse = self.post(
            Capability::Train,
            json!({ "plan": plan, "dataset": dataset, "objective": objective, "hyper": hyper }),
        )?;
        self.fetch_adapter(&resp)
    }
}

impl Evaluator for HttpClient {
    fn evaluate(&self, plan: &WeightState) -> Result<TradeoffPoint, BackendError> {
        let plan = MergePlan::from_state(plan)?;
        let point: TradeoffPoint = self.post(Capability::Evaluate, json!({ "plan": plan }))?;
        if !point.s.is_finite() || !point.u.is_finite() {
            return Err(BackendError::InvalidResponse("non-finite trade-off point".into()));
        }
        Ok(point)
    }
}
