//! Self-generated forget data: a NeuralUCB search over soft prompts scored
//! by a weighted harmonic mean of relevance and Vendi diversity, repeated
//! over outer iterations that warm-start from the best prompts so far and
//! harvest one response per context with the winning prompt.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{
    stable_hash, BackendError, DecodingParams, Embedder, Generator, InstructionRenderer, RelevanceOracle,
};
use crate::bandit::{BanditConfig, BanditError, BanditState, SoftPromptArm, DEFAULT_K_WARM};
use crate::diversity::{vendi_from_vectors, vendi_with_history, DiversityError, DEFAULT_VENDI_CAP};

/// Std of the local arms drawn around warm-start prompts.
const LOCAL_SIGMA: f64 = 0.2;
const EMBEDDINGS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Bandit(#[from] BanditError),
    #[error(transparent)]
    Diversity(#[from] DiversityError),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed dataset file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("embedding checksum mismatch: expected {expected}, found {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("generation stopped after {completed} outer iterations: {source}")]
    Aborted { partial: Box<ForgetDataset>, completed: usize, source: Box<DatagenError> },
}

impl DatagenError {
    pub fn kind(&self) -> &'static str {
        match self {
            DatagenError::Config(_) => "ConfigError",
            DatagenError::Backend(e) => e.kind(),
            DatagenError::Bandit(_) => "BanditError",
            DatagenError::Diversity(_) => "DiversityError",
            DatagenError::Io { .. } => "IoError",
            DatagenError::Malformed { .. } => "MalformedDataset",
            DatagenError::ChecksumMismatch { .. } => "ChecksumMismatch",
            DatagenError::Aborted { source, .. } => source.kind(),
        }
    }
}

/// Relevance, diversity and their weighted harmonic mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeScore {
    pub relevance: f64,
    pub diversity: f64,
    pub alpha: f64,
    pub value: f64,
    /// `τ = 0` with `α < 1`: the value is 0 by convention.
    pub zero_relevance: bool,
}

/// `(α/v + (1−α)/τ)⁻¹`, with the endpoints `α = 0 → τ` and `α = 1 → v`
/// taken exactly.
pub fn composite_score(v: f64, tau: f64, alpha: f64) -> Result<CompositeScore, DatagenError> {
    if !(v.is_finite() && v > 0.0) {
        return Err(DatagenError::Config(format!("diversity {v} must be positive")));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(DatagenError::Config(format!("relevance {tau} outside [0, 1]")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DatagenError::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let zero_relevance = tau == 0.0 && alpha < 1.0;
    let value = if alpha == 1.0 {
        v
    } else if zero_relevance {
        0.0
    } else if alpha == 0.0 {
        tau
    } else {
        1.0 / (alpha / v + (1.0 - alpha) / tau)
    };
    Ok(CompositeScore { relevance: tau, diversity: v, alpha, value, zero_relevance })
}

/// The context set and how many contexts each candidate is tried on.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationContext {
    contexts: Vec<String>,
    batch_size: usize,
}

impl GenerationContext {
    pub fn new(contexts: Vec<String>, batch_size: usize) -> Result<Self, DatagenError> {
        if contexts.is_empty() {
            return Err(DatagenError::Config("at least one generation context is required".into()));
        }
        if batch_size == 0 {
            return Err(DatagenError::Config("batch_size must be at least 1".into()));
        }
        Ok(Self { contexts, batch_size })
    }

    pub fn contexts(&self) -> &[String] {
        &self.contexts
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Context indices for one evaluation, without replacement while the
    /// batch fits, in ascending order.
    fn sample_batch(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = self.contexts.len();
        let mut idx: Vec<usize> = if self.batch_size <= n {
            sample(rng, n, self.batch_size).into_vec()
        } else {
            (0..self.batch_size).map(|_| rng.random_range(0..n)).collect()
        };
        idx.sort_unstable();
        idx
    }
}

/// Borrowed generation-side backends.
#[derive(Clone, Copy)]
pub struct GenBackends<'a> {
    pub renderer: &'a dyn InstructionRenderer,
    pub generator: &'a dyn Generator,
    pub embedder: &'a dyn Embedder,
    pub relevance: &'a dyn RelevanceOracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgetRecord {
    pub context_index: usize,
    pub instruction: String,
    pub response: String,
    pub relevance: f64,
    pub outer_iteration: usize,
    /// Relevance fell below the configured floor; kept for auditability.
    #[serde(default)]
    pub below_floor: bool,
}

/// Append-only records plus their embeddings, deduplicated on the
/// normalized response text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForgetDataset {
    records: Vec<ForgetRecord>,
    embeddings: Vec<Vec<f64>>,
    seen: BTreeSet<[u8; 32]>,
}

/// Lowercased with whitespace runs collapsed to single spaces.
pub fn normalize_response(text: &str) -> String {
    text.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

fn response_key(text: &str) -> [u8; 32] {
    Sha256::digest(normalize_response(text).as_bytes()).into()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    ctx: usize,
    instruction: String,
    response: String,
    tau: f64,
    iter: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingsManifest {
    pub format_version: u32,
    pub rows: usize,
    pub dim: usize,
    pub sha256: String,
}

/// Sibling files of a dataset: `x.jsonl` → `x.emb.bin`, `x.emb.json`.
pub fn embedding_paths(dataset: &Path) -> (PathBuf, PathBuf) {
    (dataset.with_extension("emb.bin"), dataset.with_extension("emb.json"))
}

impl ForgetDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ForgetRecord] {
        &self.records
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn contains(&self, response: &str) -> bool {
        self.seen.contains(&response_key(response))
    }

    /// Appends unless the response is blank or already present; returns
    /// whether it was added.
    pub fn push(&mut self, record: ForgetRecord, embedding: Vec<f64>) -> bool {
        if record.response.trim().is_empty() {
            return false;
        }
        if !self.seen.insert(response_key(&record.response)) {
            return false;
        }
        self.records.push(record);
        self.embeddings.push(embedding);
        true
    }

    /// Vendi score of every stored embedding (1.0 for an empty dataset).
    pub fn vendi(&self) -> Result<f64, DatagenError> {
        if self.embeddings.is_empty() {
            return Ok(1.0);
        }
        let rows: Vec<&[f64]> = self.embeddings.iter().map(Vec::as_slice).collect();
        Ok(vendi_from_vectors(&rows)?)
    }

    /// Writes the JSONL records and the float32 embedding blob with its
    /// manifest; row `i` of the blob belongs to line `i`.
    pub fn write(&self, path: &Path) -> Result<(), DatagenError> {
        let io = |p: &Path| {
            let p = p.to_path_buf();
            move |source| DatagenError::Io { path: p, source }
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io(dir))?;
        }
        let mut text = Vec::new();
        for r in &self.records {
            let line = RecordLine {
                ctx: r.context_index,
                instruction: r.instruction.clone(),
                response: r.response.clone(),
                tau: r.relevance,
                iter: r.outer_iteration,
            };
            serde_json::to_writer(&mut text, &line).expect("record serializes");
            text.push(b'\n');
        }
        fs::write(path, &text).map_err(io(path))?;

        let dim = self.embeddings.first().map_or(0, Vec::len);
        let mut blob = Vec::with_capacity(self.embeddings.len() * dim * 4);
        for v in &self.embeddings {
            for &x in v {
                blob.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let manifest = EmbeddingsManifest {
            format_version: EMBEDDINGS_FORMAT_VERSION,
            rows: self.embeddings.len(),
            dim,
            sha256: hex::encode(Sha256::digest(&blob)),
        };
        let (bin, json) = embedding_paths(path);
        fs::write(&bin, &blob).map_err(io(&bin))?;
        let mut f = fs::File::create(&json).map_err(io(&json))?;
        serde_json::to_writer_pretty(&mut f, &manifest).expect("manifest serializes");
        f.write_all(b"\n").map_err(io(&json))?;
        Ok(())
    }

    /// Reads a dataset written by [`ForgetDataset::write`]. Embeddings come
    /// back at float32 precision.
    pub fn read(path: &Path) -> Result<Self, DatagenError> {
        let malformed = |reason: String| DatagenError::Malformed { path: path.to_path_buf(), reason };
        let text = fs::read_to_string(path).map_err(|source| DatagenError::Io { path: path.to_path_buf(), source })?;
        let (bin, json) = embedding_paths(path);
        let manifest: EmbeddingsManifest = serde_json::from_slice(
            &fs::read(&json).map_err(|source| DatagenError::Io { path: json.clone(), source })?,
        )
        .map_err(|e| malformed(format!("embedding manifest: {e}")))?;
        let blob = fs::read(&bin).map_err(|source| DatagenError::Io { path: bin.clone(), source })?;
        let actual = hex::encode(Sha256::digest(&blob));
        if actual != manifest.sha256 {
            return Err(DatagenError::ChecksumMismatch { expected: manifest.sha256, actual });
        }
        if blob.len() != manifest.rows * manifest.dim * 4 {
            return Err(malformed(format!("embedding blob has {} bytes", blob.len())));
        }
        let floats: Vec<f64> =
            blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        let mut out = Self::new();
        let mut lines = 0;
        for (i, line) in text.lines().enumerate() {
            let r: RecordLine = serde_json::from_str(line).map_err(|e| malformed(format!("line {}: {e}", i + 1)))?;
            let emb = floats
                .get(i * manifest.dim..(i + 1) * manifest.dim)
                .ok_or_else(|| malformed(format!("no embedding row for line {}", i + 1)))?
                .to_vec();
            let record = ForgetRecord {
                context_index: r.ctx,
                instruction: r.instruction,
                response: r.response,
                relevance: r.tau,
                outer_iteration: r.iter,
                below_floor: false,
            };
            if !out.push(record, emb) {
                return Err(malformed(format!("line {} is blank or a duplicate", i + 1)));
            }
            lines += 1;
        }
        if lines != manifest.rows {
            return Err(malformed(format!("{lines} records but {} embedding rows", manifest.rows)));
        }
        Ok(out)
    }
}

/// Instruction-search settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    /// Outer iterations.
    #[serde(default = "default_m")]
    pub m: usize,
    /// Inner rounds per outer iteration.
    #[serde(default = "default_n")]
    pub n: usize,
    /// Weight on diversity in the composite score.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    /// Soft-prompt dimension.
    #[serde(default = "default_d_p")]
    pub d_p: usize,
    #[serde(default = "default_k_warm")]
    pub k_warm: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Most recent dataset rows entering a candidate's Vendi score.
    #[serde(default = "default_vendi_cap")]
    pub vendi_cap: usize,
    /// Records with relevance below this are kept but flagged.
    #[serde(default)]
    pub tau_floor: f64,
    #[serde(default = "default_one")]
    pub nu: f64,
    #[serde(default = "default_one")]
    pub lambda_reg: f64,
    #[serde(default)]
    pub decoding: DecodingParams,
}

fn default_m() -> usize {
    3
}
fn default_n() -> usize {
    5
}
fn default_alpha() -> f64 {
    0.5
}
fn default_pool_size() -> usize {
    200
}
fn default_d_p() -> usize {
    16
}
fn default_k_warm() -> usize {
    DEFAULT_K_WARM
}
fn default_batch_size() -> usize {
    4
}
fn default_vendi_cap() -> usize {
    DEFAULT_VENDI_CAP
}
fn default_one() -> f64 {
    1.0
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            m: default_m(),
            n: default_n(),
            alpha: default_alpha(),
            pool_size: default_pool_size(),
            d_p: default_d_p(),
            k_warm: default_k_warm(),
            batch_size: default_batch_size(),
            vendi_cap: default_vendi_cap(),
            tau_floor: 0.0,
            nu: 1.0,
            lambda_reg: 1.0,
            decoding: DecodingParams::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let fail = |m: &str| Err(DatagenError::Config(m.into()));
        if self.m == 0 || self.n == 0 {
            return fail("m and n must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail("alpha must lie in [0, 1]");
        }
        if self.pool_size == 0 || self.d_p == 0 || self.batch_size == 0 {
            return fail("pool_size, d_p and batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.tau_floor) {
            return fail("tau_floor must lie in [0, 1]");
        }
        if !(self.nu >= 0.0 && self.lambda_reg > 0.0) {
            return fail("nu must be non-negative and lambda_reg positive");
        }
        self.decoding.validate().map_err(DatagenError::Config)
    }
}

/// One scored evaluation of an arm.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub arm_id: u64,
    pub instruction: String,
    pub context_indices: Vec<usize>,
    pub responses: Vec<String>,
    pub relevances: Vec<f64>,
    pub embeddings: Vec<Vec<f64>>,
    pub score: CompositeScore,
}

/// Renders the arm, answers each sampled context once, and scores the batch
/// against the dataset snapshot.
pub fn evaluate_candidate(
    arm: &SoftPromptArm,
    context_indices: &[usize],
    ctx: &GenerationContext,
    snapshot: &ForgetDataset,
    backends: GenBackends<'_>,
    cfg: &GenConfig,
) -> Result<Candidate, DatagenError> {
    let instruction = backends.renderer.render_instruction(&arm.z)?;
    let params = DecodingParams { samples: 1, ..cfg.decoding.clone() };
    let mut responses = Vec::with_capacity(context_indices.len());
    for &i in context_indices {
        let mut out = backends.generator.generate(&ctx.contexts[i], &instruction, &params)?;
        if out.is_empty() {
            return Err(BackendError::InvalidResponse("generator returned no samples".into()).into());
        }
        responses.push(out.swap_remove(0));
    }
    if responses.iter().all(|r| r.trim().is_empty()) {
        return Err(BackendError::EmptyGeneration.into());
    }
    let relevances = backends.relevance.relevance(&responses)?;
    if relevances.len() != responses.len() || relevances.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(BackendError::InvalidResponse("relevance scores must be one value in [0, 1] per text".into()).into());
    }
    let tau = relevances.iter().sum::<f64>() / relevances.len() as f64;
    let embeddings = backends.embedder.embed(&responses)?.into_vectors();
    let v = vendi_with_history(&embeddings, snapshot.embeddings(), Some(cfg.vendi_cap))?;
    let score = composite_score(v, tau, cfg.alpha)?;
    Ok(Candidate { arm_id: arm.id, instruction, context_indices: context_indices.to_vec(), responses, relevances, embeddings, score })
}

/// One inner round as recorded in the score table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub round: usize,
    pub arm_id: u64,
    pub relevance: f64,
    pub diversity: f64,
    pub value: f64,
    /// Bandit target: `value` over the running maximum, in `[0, 1]`.
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerOutcome {
    pub best_arm: SoftPromptArm,
    pub best_score: CompositeScore,
    pub table: Vec<ScoreRow>,
    /// Rounds whose candidate failed at a backend, with the error kind.
    pub skipped: Vec<(usize, &'static str)>,
}

/// `n` rounds of select → evaluate → update. Failed candidates are skipped;
/// the call fails only when every round does.
#[allow(clippy::too_many_arguments)]
pub fn run_inner_loop(
    state: &mut BanditState,
    pool: &[SoftPromptArm],
    ctx: &GenerationContext,
    snapshot: &ForgetDataset,
    n: usize,
    backends: GenBackends<'_>,
    cfg: &GenConfig,
    seed: u64,
) -> Result<InnerOutcome, DatagenError> {
    if n == 0 {
        return Err(DatagenError::Config("n must be at least 1".into()));
    }
    let mut table = Vec::with_capacity(n);
    let mut skipped = Vec::new();
    let mut best: Option<(SoftPromptArm, CompositeScore)> = None;
    let mut running_max = 0.0_f64;
    let mut last_err = None;
    for round in 0..n {
        let arm = state.select(pool)?.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(seed, &[b"batch", &(round as u64).to_le_bytes()]));
        let batch = ctx.sample_batch(&mut rng);
        let cand = match evaluate_candidate(&arm, &batch, ctx, snapshot, backends, cfg) {
            Ok(c) => c,
            Err(DatagenError::Backend(e)) => {
                log::warn!("round {round}: arm {} skipped: {e}", arm.id);
                skipped.push((round, e.kind()));
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let value = cand.score.value;
        running_max = running_max.max(value);
        let reward = if running_max > 0.0 { (value / running_max).clamp(0.0, 1.0) } else { 0.0 };
        state.update(&arm, reward)?;
        table.push(ScoreRow {
            round,
            arm_id: arm.id,
            relevance: cand.score.relevance,
            diversity: cand.score.diversity,
            value,
            reward,
        });
        if best.as_ref().is_none_or(|(_, s)| value > s.value) {
            best = Some((arm, cand.score));
        }
    }
    match best {
        Some((best_arm, best_score)) => Ok(InnerOutcome { best_arm, best_score, table, skipped }),
        None => Err(last_err.expect("every round failed").into()),
    }
}

/// `size` arms: the first half uniform on `[-1, 1]^d`, the rest Gaussian
/// around the warm-start prompts in turn (uniform when there are none).
pub fn build_pool(size: usize, dim: usize, warm: &[Vec<f64>], id_base: u64, rng: &mut ChaCha8Rng) -> Vec<SoftPromptArm> {
    let local = Normal::new(0.0, LOCAL_SIGMA).expect("valid normal");
    let uniform_count = if warm.is_empty() { size } else { size - size / 2 };
    (0..size)
        .map(|j| {
            let z: Vec<f64> = if j < uniform_count {
                (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
            } else {
                let center = &warm[(j - uniform_count) % warm.len()];
                center.iter().map(|c| (c + local.sample(rng)).clamp(-1.0, 1.0)).collect()
            };
            SoftPromptArm::new(id_base + j as u64, z).expect("coordinates lie in [-1, 1]")
        })
        .collect()
}

/// Per-outer-iteration trace.
#[derive(Clone, Debug, PartialEq)]
pub struct OuterIteration {
    pub iteration: usize,
    /// `(z, normalized score)` pairs handed to the warm start.
    pub warm_seeds: Vec<(Vec<f64>, f64)>,
    pub inner: InnerOutcome,
    pub instruction: String,
    pub added: usize,
    pub flagged: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenOutcome {
    pub dataset: ForgetDataset,
    pub iterations: Vec<OuterIteration>,
}

/// The `k` highest raw scores seen so far, divided by the overall maximum.
fn top_seeds(history: &[(Vec<f64>, f64)], k: usize) -> Vec<(Vec<f64>, f64)> {
    let max = history.iter().map(|(_, s)| *s).fold(0.0_f64, f64::max);
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| history[b].1.total_cmp(&history[a].1));
    order
        .into_iter()
        .take(k)
        .map(|i| {
            let s = if max > 0.0 { (history[i].1 / max).clamp(0.0, 1.0) } else { 0.0 };
            (history[i].0.clone(), s)
        })
        .collect()
}

/// Runs all outer iterations. On failure the records gathered so far come
/// back inside [`DatagenError::Aborted`].
pub fn run_outer_loop(
    ctx: &GenerationContext,
    backends: GenBackends<'_>,
    cfg: &GenConfig,
    seed: u64,
) -> Result<GenOutcome, DatagenError> {
    cfg.validate()?;
    let mut dataset = ForgetDataset::new();
    let mut iterations = Vec::with_capacity(cfg.m);
    let mut scored: Vec<(Vec<f64>, f64)> = Vec::new();
    for it in 1..=cfg.m {
        match outer_iteration(it, ctx, backends, cfg, seed, &mut dataset, &scored) {
            Ok(trace) => {
                let pool_z: std::collections::BTreeMap<u64, Vec<f64>> = trace.1;
                for row in &trace.0.inner.table {
                    scored.push((pool_z[&row.arm_id].clone(), row.value));
                }
                iterations.push(trace.0);
            }
            Err(e) => {
                return Err(DatagenError::Aborted {
                    partial: Box::new(dataset),
                    completed: iterations.len(),
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(GenOutcome { dataset, iterations })
}

type IterationTrace = (OuterIteration, std::collections::BTreeMap<u64, Vec<f64>>);

fn outer_iteration(
    it: usize,
    ctx: &GenerationContext,
    backends: GenBackends<'_>,
    cfg: &GenConfig,
    seed: u64,
    dataset: &mut ForgetDataset,
    scored: &[(Vec<f64>, f64)],
) -> Result<IterationTrace, DatagenError> {
    let tag = (it as u64).to_le_bytes();
    let warm_seeds = top_seeds(scored, cfg.k_warm);
    let bandit_cfg = BanditConfig {
        nu: cfg.nu,
        lambda_reg: cfg.lambda_reg,
        ..BanditConfig::new(cfg.d_p, stable_hash(seed, &[b"bandit", &tag]))
    };
    let mut state = BanditState::warm_start(bandit_cfg, &warm_seeds, cfg.k_warm)?;
    let centers: Vec<Vec<f64>> = warm_seeds.iter().map(|(z, _)| z.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(seed, &[b"pool", &tag]));
    let pool = build_pool(cfg.pool_size, cfg.d_p, &centers, ((it - 1) * cfg.pool_size) as u64, &mut rng);
    let inner_seed = stable_hash(seed, &[b"inner", &tag]);
    let inner = run_inner_loop(&mut state, &pool, ctx, dataset, cfg.n, backends, cfg, inner_seed)?;

    let instruction = backends.renderer.render_instruction(&inner.best_arm.z)?;
    let params = DecodingParams { samples: 1, ..cfg.decoding.clone() };
    let mut responses = Vec::with_capacity(ctx.contexts.len());
    for (i, c) in ctx.contexts.iter().enumerate() {
        let out = backends.generator.generate(c, &instruction, &params)?;
        if let Some(r) = out.into_iter().next().filter(|r| !r.trim().is_empty()) {
            responses.push((i, r));
        }
    }
    let (mut added, mut flagged) = (0, 0);
    if !responses.is_empty() {
        let texts: Vec<String> = responses.iter().map(|(_, r)| r.clone()).collect();
        let taus = backends.relevance.relevance(&texts)?;
        if taus.len() != texts.len() || taus.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(BackendError::InvalidResponse("relevance scores must be one value in [0, 1] per text".into()).into());
        }
        let embeddings = backends.embedder.embed(&texts)?.into_vectors();
        for (((i, response), tau), emb) in responses.into_iter().zip(taus).zip(embeddings) {
            let below_floor = tau < cfg.tau_floor;
            let record = ForgetRecord {
                context_index: i,
                instruction: instruction.clone(),
                response,
                relevance: tau,
                outer_iteration: it,
                below_floor,
            };
            if dataset.push(record, emb) {
                added += 1;
                flagged += usize::from(below_floor);
            }
        }
    }
    let pool_z = pool.into_iter().map(|a| (a.id, a.z)).collect();
    Ok((OuterIteration { iteration: it, warm_seeds, inner, instruction, added, flagged }, pool_z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{HashingEmbedder, MockGenerator, MockRenderer, TargetVocabRelevance};
    use crate::diversity::{similarity_matrix, vendi_score, EmbeddingSet};
    use crate::toyenv::toy_generation_suite;

    #[test]
    fn composite_endpoints_and_midpoint() {
        assert_eq!(composite_score(7.0, 0.3, 0.0).unwrap().value, 0.3);
        assert_eq!(composite_score(7.0, 0.3, 1.0).unwrap().value, 7.0);
        assert!((composite_score(2.0, 0.5, 0.5).unwrap().value - 0.8).abs() < 1e-12);
        let zero = composite_score(3.0, 0.0, 0.5).unwrap();
        assert!(zero.zero_relevance && zero.value == 0.0);
        let diversity_only = composite_score(3.0, 0.0, 1.0).unwrap();
        assert!(!diversity_only.zero_relevance && diversity_only.value == 3.0);
        assert!(composite_score(0.0, 0.5, 0.5).is_err());
        assert!(composite_score(1.0, 1.5, 0.5).is_err());
    }

    #[test]
    fn composite_lies_between_its_inputs() {
        for (v, tau, alpha) in [(1.0, 0.2, 0.3), (4.0, 0.9, 0.7), (2.5, 0.01, 0.5)] {
            let c = composite_score(v, tau, alpha).unwrap().value;
            assert!(c >= tau.min(v) - 1e-12 && c <= tau.max(v) + 1e-12);
        }
    }

    #[test]
    fn dedup_normalizes_case_and_whitespace() {
        let mut d = ForgetDataset::new();
        let rec = |r: &str| ForgetRecord {
            context_index: 0,
            instruction: "i".into(),
            response: r.into(),
            relevance: 0.5,
            outer_iteration: 1,
            below_floor: false,
        };
        assert!(d.push(rec("Foo  bar"), vec![1.0, 0.0]));
        assert!(!d.push(rec("foo bar "), vec![1.0, 0.0]));
        assert!(!d.push(rec("   "), vec![1.0, 0.0]));
        assert!(d.push(rec("foo baz"), vec![0.0, 1.0]));
        assert_eq!(d.len(), 2);
        assert!((d.vendi().unwrap() - 2.0).abs() < 1e-12);
    }

    struct Constant;
    impl Generator for Constant {
        fn generate(&self, _: &str, _: &str, p: &DecodingParams) -> Result<Vec<String>, BackendError> {
            Ok(vec!["same words again".to_string(); p.samples])
        }
    }
    struct Always(f64);
    impl RelevanceOracle for Always {
        fn relevance(&self, texts: &[String]) -> Result<Vec<f64>, BackendError> {
            Ok(vec![self.0; texts.len()])
        }
    }

    fn ctx(n: usize, batch: usize) -> GenerationContext {
        GenerationContext::new((0..n).map(|i| format!("context {i}")).collect(), batch).unwrap()
    }

    #[test]
    fn duplicate_responses_add_no_diversity() {
        let renderer = MockRenderer::new(1);
        let embedder = HashingEmbedder::new(1);
        let b = GenBackends { renderer: &renderer, generator: &Constant, embedder: &embedder, relevance: &Always(1.0) };
        let arm = SoftPromptArm::new(0, vec![0.1; 4]).unwrap();
        let cfg = GenConfig { alpha: 0.0, ..GenConfig::default() };
        let c = evaluate_candidate(&arm, &[0, 1, 2, 3], &ctx(4, 4), &ForgetDataset::new(), b, &cfg).unwrap();
        assert!((c.score.diversity - 1.0).abs() < 1e-9);
        assert_eq!(c.score.value, 1.0);
    }

    #[test]
    fn candidate_matches_hand_pipeline() {
        let renderer = MockRenderer::new(5);
        let vocab: Vec<String> = (0..6).map(|i| format!("bad{i}")).collect();
        let filler: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
        let generator = MockGenerator::new(5, vocab.clone(), filler, 0.4);
        let embedder = HashingEmbedder::new(5);
        let relevance = TargetVocabRelevance::new(&vocab);
        let b = GenBackends { renderer: &renderer, generator: &generator, embedder: &embedder, relevance: &relevance };
        let arm = SoftPromptArm::new(3, vec![0.5, -0.2, 0.9]).unwrap();
        let cfg = GenConfig::default();
        let context = ctx(5, 2);
        let c = evaluate_candidate(&arm, &[1, 4], &context, &ForgetDataset::new(), b, &cfg).unwrap();

        let inst = renderer.render_instruction(&arm.z).unwrap();
        let params = DecodingParams { samples: 1, ..DecodingParams::default() };
        let texts: Vec<String> =
            [1, 4].iter().map(|&i| generator.generate(&context.contexts()[i], &inst, &params).unwrap().remove(0)).collect();
        let tau = texts.iter().map(|t| relevance.score(t)).sum::<f64>() / 2.0;
        let set = EmbeddingSet::new(texts.iter().map(|t| embedder.embed_one(t)).collect()).unwrap();
        let v = vendi_score(&similarity_matrix(&set)).unwrap();
        let expected = 1.0 / (0.5 / v + 0.5 / tau);
        assert!((c.score.value - expected).abs() < 1e-9, "{} vs {expected}", c.score.value);
    }

    fn suite_backends(s: &crate::toyenv::GenerationSuite) -> GenBackends<'_> {
        GenBackends { renderer: &s.renderer, generator: &s.generator, embedder: &s.embedder, relevance: &s.relevance }
    }

    #[test]
    fn single_round_picks_the_evaluated_arm() {
        let suite = toy_generation_suite(2);
        let cfg = GenConfig { d_p: 8, pool_size: 20, ..GenConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pool = build_pool(20, 8, &[], 0, &mut rng);
        let mut state = BanditState::fresh(BanditConfig::new(8, 1));
        let context = GenerationContext::new(suite.contexts.clone(), 3).unwrap();
        let out =
            run_inner_loop(&mut state, &pool, &context, &ForgetDataset::new(), 1, suite_backends(&suite), &cfg, 9)
                .unwrap();
        assert_eq!(out.table.len(), 1);
        assert_eq!(out.best_arm.id, out.table[0].arm_id);
        assert_eq!(out.table[0].reward, 1.0);
    }

    /// Relevance 1 for responses to one instruction, 0 otherwise.
    struct Marked(String);
    impl RelevanceOracle for Marked {
        fn relevance(&self, texts: &[String]) -> Result<Vec<f64>, BackendError> {
            Ok(texts.iter().map(|t| if t.starts_with(&self.0) { 1.0 } else { 0.0 }).collect())
        }
    }

    /// Relevance peaks at the instruction rendered from `z₀ = 0.2` and falls
    /// off linearly.
    struct Peaked;
    impl RelevanceOracle for Peaked {
        fn relevance(&self, texts: &[String]) -> Result<Vec<f64>, BackendError> {
            Ok(texts
                .iter()
                .map(|t| {
                    let code: f64 = t.split_whitespace().next().unwrap()[3..].parse().unwrap();
                    (1.0 - (code - 1200.0).abs() / 2000.0).clamp(0.0, 1.0)
                })
                .collect())
        }
    }
    struct Echo;
    impl Generator for Echo {
        fn generate(&self, c: &str, i: &str, p: &DecodingParams) -> Result<Vec<String>, BackendError> {
            Ok(vec![format!("{i} {c}"); p.samples])
        }
    }
    struct ById;
    impl InstructionRenderer for ById {
        fn render_instruction(&self, z: &[f64]) -> Result<String, BackendError> {
            Ok(format!("arm{}", ((z[0] + 1.0) * 1000.0).round() as i64))
        }
    }

    #[test]
    fn best_arm_is_the_top_scored_and_pulls_shift_toward_reward() {
        let pool: Vec<SoftPromptArm> =
            (0..6).map(|i| SoftPromptArm::new(i, vec![-1.0 + 0.3 * i as f64, 0.0]).unwrap()).collect();
        let embedder = HashingEmbedder::new(0);
        let b = GenBackends { renderer: &ById, generator: &Echo, embedder: &embedder, relevance: &Peaked };
        let cfg = GenConfig { alpha: 0.0, d_p: 2, ..GenConfig::default() };
        let mut state = BanditState::fresh(BanditConfig::new(2, 3));
        let out = run_inner_loop(&mut state, &pool, &ctx(3, 2), &ForgetDataset::new(), 30, b, &cfg, 4).unwrap();
        let top = out.table.iter().max_by(|a, b| a.value.total_cmp(&b.value)).unwrap();
        assert_eq!(out.best_arm.id, top.arm_id);
        assert_eq!(out.best_score.value, top.value);
        assert!(out.table.iter().all(|r| (0.0..=1.0).contains(&r.reward)));
        let mean = |rows: &[ScoreRow]| rows.iter().map(|r| r.value).sum::<f64>() / rows.len() as f64;
        assert!(mean(&out.table[15..]) > mean(&out.table[..15]));
    }

    #[test]
    fn rewarded_arm_wins() {
        let pool = vec![SoftPromptArm::new(0, vec![-0.5, 0.3]).unwrap(), SoftPromptArm::new(1, vec![0.2, 0.0]).unwrap()];
        let embedder = HashingEmbedder::new(0);
        let b = GenBackends { renderer: &ById, generator: &Echo, embedder: &embedder, relevance: &Marked("arm1200 ".into()) };
        let cfg = GenConfig { alpha: 0.0, d_p: 2, ..GenConfig::default() };
        let mut state = BanditState::fresh(BanditConfig::new(2, 3));
        let out = run_inner_loop(&mut state, &pool, &ctx(3, 2), &ForgetDataset::new(), 4, b, &cfg, 4).unwrap();
        assert_eq!(out.best_arm.id, 1);
        assert_eq!(out.best_score.value, 1.0);
    }

    #[test]
    fn inner_loop_is_deterministic() {
        let suite = toy_generation_suite(4);
        let cfg = GenConfig { d_p: 8, ..GenConfig::default() };
        let context = GenerationContext::new(suite.contexts.clone(), 2).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let pool = build_pool(30, 8, &[], 0, &mut rng);
            let mut state = BanditState::fresh(BanditConfig::new(8, 6));
            run_inner_loop(&mut state, &pool, &context, &ForgetDataset::new(), 4, suite_backends(&suite), &cfg, 2)
                .unwrap()
                .table
        };
        assert_eq!(run(), run());
    }

    struct Down;
    impl Generator for Down {
        fn generate(&self, _: &str, _: &str, _: &DecodingParams) -> Result<Vec<String>, BackendError> {
            Err(BackendError::BackendUnavailable("down".into()))
        }
    }

    #[test]
    fn all_rounds_failing_propagates() {
        let renderer = MockRenderer::new(1);
        let embedder = HashingEmbedder::new(1);
        let b = GenBackends { renderer: &renderer, generator: &Down, embedder: &embedder, relevance: &Always(1.0) };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pool = build_pool(4, 3, &[], 0, &mut rng);
        let mut state = BanditState::fresh(BanditConfig::new(3, 1));
        let cfg = GenConfig { d_p: 3, ..GenConfig::default() };
        let err = run_inner_loop(&mut state, &pool, &ctx(2, 1), &ForgetDataset::new(), 3, b, &cfg, 0).unwrap_err();
        assert!(matches!(err, DatagenError::Backend(BackendError::BackendUnavailable(_))));

        let err = run_outer_loop(&ctx(2, 1), b, &cfg, 0).unwrap_err();
        match err {
            DatagenError::Aborted { partial, completed, .. } => {
                assert!(partial.is_empty());
                assert_eq!(completed, 0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pool_mixes_uniform_and_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let center = vec![0.9; 16];
        let pool = build_pool(200, 16, std::slice::from_ref(&center), 100, &mut rng);
        assert_eq!(pool.len(), 200);
        assert_eq!(pool[0].id, 100);
        assert!(pool.iter().all(|a| a.z.iter().all(|x| (-1.0..=1.0).contains(x))));
        let near = |a: &SoftPromptArm| a.z.iter().zip(&center).all(|(x, c)| (x - c).abs() < 1.0);
        assert!(pool[100..].iter().all(near));
        assert!(pool[..100].iter().filter(|a| near(a)).count() < 5);
    }

    #[test]
    fn minimal_outer_loop() {
        let suite = toy_generation_suite(1);
        let context = GenerationContext::new(suite.contexts[..3].to_vec(), 2).unwrap();
        let cfg = GenConfig { m: 1, n: 1, d_p: 8, pool_size: 10, ..GenConfig::default() };
        let out = run_outer_loop(&context, suite_backends(&suite), &cfg, 1).unwrap();
        assert!(out.dataset.len() <= 3 && !out.dataset.is_empty());
        assert!(out.iterations[0].warm_seeds.is_empty());
    }

    #[test]
    fn second_iteration_warm_starts_from_top_ten() {
        let suite = toy_generation_suite(3);
        let context = GenerationContext::new(suite.contexts.clone(), 2).unwrap();
        let cfg = GenConfig { m: 2, n: 12, d_p: 8, pool_size: 40, ..GenConfig::default() };
        let out = run_outer_loop(&context, suite_backends(&suite), &cfg, 3).unwrap();
        let first = &out.iterations[0].inner.table;
        let warm = &out.iterations[1].warm_seeds;
        assert_eq!(warm.len(), 10);
        let mut values: Vec<f64> = first.iter().map(|r| r.value).collect();
        values.sort_by(|a, b| b.total_cmp(a));
        let max = values[0];
        for (w, v) in warm.iter().zip(&values) {
            assert!((w.1 - v / max).abs() < 1e-12);
        }
        let sizes: Vec<usize> = out.iterations.iter().map(|i| i.added).collect();
        assert_eq!(out.dataset.len(), sizes.iter().sum::<usize>());
    }

    #[test]
    fn dataset_round_trip_and_corruption() {
        let suite = toy_generation_suite(5);
        let context = GenerationContext::new(suite.contexts.clone(), 2).unwrap();
        let cfg = GenConfig { m: 2, n: 3, d_p: 8, pool_size: 20, ..GenConfig::default() };
        let out = run_outer_loop(&context, suite_backends(&suite), &cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forget.jsonl");
        out.dataset.write(&path).unwrap();
        let first_line = fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
        assert!(first_line.starts_with("{\"ctx\":"), "{first_line}");
        let keys: Vec<String> =
            serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(&first_line).unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 5);
        let back = ForgetDataset::read(&path).unwrap();
        assert_eq!(back.records().len(), out.dataset.len());
        for (a, b) in back.embeddings().iter().zip(out.dataset.embeddings()) {
            assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6));
        }
        let again = dir.path().join("again.jsonl");
        out.dataset.write(&again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
        let (bin, _) = embedding_paths(&path);
        let mut blob = fs::read(&bin).unwrap();
        blob[0] ^= 1;
        fs::write(&bin, blob).unwrap();
        assert!(matches!(ForgetDataset::read(&path), Err(DatagenError::ChecksumMismatch { .. })));
    }
}
