//! A seeded, fully in-process stand-in for a model and its forget/retain
//! tasks: a two-layer ReLU network over 32 features, two 16-class tasks
//! living on disjoint feature and logit blocks, a low-rank gradient-descent
//! trainer, accuracy evaluators, and a mock text-generation bundle.
//!
//! Each task's inputs are zero outside its feature block and the first
//! layer starts block-diagonal, so on forget inputs the retain hidden units
//! sit exactly at the ReLU kink and pass no gradient. Adapters trained on
//! either task therefore write only to that task's hidden units and logits.
//! The tasks still interfere: the readout layer starts dense, so moving the
//! forget hidden units shifts the retain logits too.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapters::{AdapterDelta, LowRankPair, ModelSignature, WeightState};
use crate::backends::{
    stable_hash, tokenize, BackendError, DecodingParams, Evaluator, Generator, HashingEmbedder, InstructionRenderer,
    Objective, RelevanceOracle, TargetVocabRelevance, TrainHyper, Trainer,
};
use crate::numerics::DenseMatrix;
use crate::unlearn::TradeoffPoint;

pub const WIDTH: usize = 32;
pub const BLOCK: usize = 16;
pub const SAMPLES: usize = 256;
pub const LAYERS: [&str; 2] = ["layer1", "layer2"];
pub const FORGET_REF: &str = "toy:forget";
pub const RETAIN_REF: &str = "toy:retain";
pub const BASE_REF: &str = "toy:base";

/// Std of the initial readout weights.
const READOUT_INIT: f64 = 0.1;
const PREFIT_TARGET: f64 = 0.92;
const PREFIT_LR: f64 = 0.5;
const PREFIT_MAX_STEPS: usize = 4000;
const DIVERGENCE_LOSS: f64 = 1e6;
/// Multiplier on `B·A`. With unit scale a rank-4 adapter trained for 200
/// steps barely moves a task the base already solves.
pub const LORA_SCALE: f64 = 12.0;
/// Frobenius-norm cap on each factor's gradient per step.
const GRAD_CLIP: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Forget,
    Retain,
}

impl TaskKind {
    /// Dominant input features and the logit rows the task reads.
    pub fn block(self) -> Range<usize> {
        match self {
            TaskKind::Forget => 0..BLOCK,
            TaskKind::Retain => BLOCK..WIDTH,
        }
    }

    pub fn dataset_ref(self) -> &'static str {
        match self {
            TaskKind::Forget => FORGET_REF,
            TaskKind::Retain => RETAIN_REF,
        }
    }

    pub fn from_ref(dataset: &str) -> Option<Self> {
        match dataset {
            FORGET_REF => Some(TaskKind::Forget),
            RETAIN_REF => Some(TaskKind::Retain),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    pub kind: TaskKind,
    /// `n × 32`, one sample per row.
    pub inputs: DenseMatrix,
    /// Class index within the task's 16-logit block.
    pub labels: Vec<usize>,
}

impl ToyTask {
    fn generate(kind: TaskKind, rng: &mut ChaCha8Rng) -> Self {
        let block = kind.block();
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let teacher = DenseMatrix::from_fn(BLOCK, BLOCK, |_, _| unit.sample(rng));
        let inputs = DenseMatrix::from_fn(SAMPLES, WIDTH, |_, j| if block.contains(&j) { unit.sample(rng) } else { 0.0 });
        let labels = (0..SAMPLES).map(|i| argmax(&teacher.matvec(&inputs.row(i)[block.clone()]))).collect();
        Self { kind, inputs, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
}

/// Per-layer dense weights `layer1` (hidden × input) and `layer2` (logits × hidden).
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub w1: DenseMatrix,
    pub w2: DenseMatrix,
}

impl Weights {
    fn from_map(mut map: BTreeMap<String, DenseMatrix>) -> Self {
        Self {
            w1: map.remove(LAYERS[0]).expect("layer1 present"),
            w2: map.remove(LAYERS[1]).expect("layer2 present"),
        }
    }

    fn to_map(&self) -> BTreeMap<String, DenseMatrix> {
        BTreeMap::from([(LAYERS[0].to_string(), self.w1.clone()), (LAYERS[1].to_string(), self.w2.clone())])
    }
}

struct Pass {
    hidden: DenseMatrix,
    logits: DenseMatrix,
}

fn forward(w: &Weights, x: &DenseMatrix) -> Pass {
    let mut hidden = x.matmul(&w.w1.transpose()).expect("shapes agree");
    hidden.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    let logits = hidden.matmul(&w.w2.transpose()).expect("shapes agree");
    Pass { hidden, logits }
}

/// Fraction of samples whose highest logit within the task block is the label.
pub fn accuracy(w: &Weights, task: &ToyTask) -> f64 {
    let pass = forward(w, &task.inputs);
    let block = task.kind.block();
    let hits = (0..task.len()).filter(|&i| argmax(&pass.logits.row(i)[block.clone()]) == task.labels[i]).count();
    hits as f64 / task.len() as f64
}

/// Mean cross-entropy over the task block and its gradients with respect to
/// both layers.
fn loss_and_grads(w: &Weights, task: &ToyTask) -> (f64, DenseMatrix, DenseMatrix) {
    let n = task.len();
    let pass = forward(w, &task.inputs);
    let block = task.kind.block();
    let mut d_logits = DenseMatrix::zeros(n, WIDTH);
    let mut loss = 0.0;
    for i in 0..n {
        let z = &pass.logits.row(i)[block.clone()];
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() + max - z[task.labels[i]];
        for (k, e) in exps.iter().enumerate() {
            let target = if k == task.labels[i] { 1.0 } else { 0.0 };
            d_logits[(i, block.start + k)] = (e / sum - target) / n as f64;
        }
    }
    let d_w2 = d_logits.transpose().matmul(&pass.hidden).expect("shapes agree");
    let mut d_pre = d_logits.matmul(&w.w2).expect("shapes agree");
    for (d, h) in d_pre.as_mut_slice().iter_mut().zip(pass.hidden.as_slice()) {
        if *h <= 0.0 {
            *d = 0.0;
        }
    }
    let d_w1 = d_pre.transpose().matmul(&task.inputs).expect("shapes agree");
    (loss / n as f64, d_w1, d_w2)
}

/// The frozen base model and both tasks.
#[derive(Clone, Debug)]
pub struct ToyEnv {
    pub seed: u64,
    pub signature: ModelSignature,
    pub base: Weights,
    pub forget: ToyTask,
    pub retain: ToyTask,
    pub prefit_steps: usize,
}

/// Builds the environment for `seed`: draws both tasks, starts from a
/// block-diagonal first layer and pre-fits both layers on the two tasks
/// until each reaches the target accuracy.
pub fn make_env(seed: u64) -> ToyEnv {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(seed, &[b"toy-env"]));
    let forget = ToyTask::generate(TaskKind::Forget, &mut rng);
    let retain = ToyTask::generate(TaskKind::Retain, &mut rng);
    let jitter = Normal::new(0.0, 0.1).expect("valid normal");
    let w1 = DenseMatrix::from_fn(WIDTH, WIDTH, |i, j| {
        let same_block = (i < BLOCK) == (j < BLOCK);
        match (i == j, same_block) {
            (true, _) => 1.0 + jitter.sample(&mut rng),
            (false, true) => jitter.sample(&mut rng),
            (false, false) => 0.0,
        }
    });
    let readout = Normal::new(0.0, READOUT_INIT).expect("valid normal");
    let w2 = DenseMatrix::from_fn(WIDTH, WIDTH, |_, _| readout.sample(&mut rng));
    let mut base = Weights { w1, w2 };
    let mut steps = 0;
    while steps < PREFIT_MAX_STEPS {
        if steps % 10 == 0 && accuracy(&base, &forget) >= PREFIT_TARGET && accuracy(&base, &retain) >= PREFIT_TARGET {
            break;
        }
        for task in [&forget, &retain] {
            let (_, g1, g2) = loss_and_grads(&base, task);
            base.w1.add_scaled(-PREFIT_LR, &g1).expect("shapes agree");
            base.w2.add_scaled(-PREFIT_LR, &g2).expect("shapes agree");
        }
        steps += 1;
    }
    let signature = ModelSignature::new(LAYERS.iter().map(|l| (l.to_string(), (WIDTH, WIDTH))).collect())
        .expect("non-empty signature");
    ToyEnv { seed, signature, base, forget, retain, prefit_steps: steps }
}

impl ToyEnv {
    pub fn base_state(&self) -> WeightState {
        WeightState::base(BASE_REF, self.signature.clone())
    }

    pub fn base_weights(&self) -> BTreeMap<String, DenseMatrix> {
        self.base.to_map()
    }

    pub fn task(&self, kind: TaskKind) -> &ToyTask {
        match kind {
            TaskKind::Forget => &self.forget,
            TaskKind::Retain => &self.retain,
        }
    }

    pub fn materialize(&self, plan: &WeightState) -> Result<Weights, BackendError> {
        if plan.signature() != &self.signature {
            return Err(BackendError::InvalidRequest("plan signature does not match the toy model".into()));
        }
        Ok(Weights::from_map(plan.materialize_all(&self.base.to_map())?))
    }

    /// `s` = forget-task accuracy, `u` = retain-task accuracy.
    pub fn evaluate(&self, plan: &WeightState) -> Result<TradeoffPoint, BackendError> {
        let w = self.materialize(plan)?;
        Ok(TradeoffPoint::new(accuracy(&w, &self.forget), accuracy(&w, &self.retain)))
    }

    /// Trains a fresh low-rank adapter over both layers on top of `plan`:
    /// `B = 0`, `A ~ N(0, 1/32)`, gradient descent on the task's
    /// cross-entropy with each factor's gradient norm capped. Returned
    /// factors are rounded to f32 so they survive a round trip through the
    /// adapter file format unchanged.
    pub fn train(
        &self,
        plan: &WeightState,
        task: TaskKind,
        objective: Objective,
        hyper: &TrainHyper,
    ) -> Result<AdapterDelta, BackendError> {
        Ok(self.train_traced(plan, task, objective, hyper)?.0)
    }

    /// Like [`ToyEnv::train`], also returning the loss before each step.
    pub fn train_traced(
        &self,
        plan: &WeightState,
        task: TaskKind,
        objective: Objective,
        hyper: &TrainHyper,
    ) -> Result<(AdapterDelta, Vec<f64>), BackendError> {
        if hyper.rank == 0 || hyper.rank > WIDTH || !(hyper.lr.is_finite() && hyper.lr > 0.0) {
            return Err(BackendError::InvalidRequest(format!("bad toy training hyper-parameters {hyper:?}")));
        }
        let frozen = self.materialize(plan)?;
        let tag: &[u8] = match objective {
            Objective::ForgetFit => b"forget_fit",
            Objective::RetainFit => b"retain_fit",
        };
        let seed = stable_hash(self.seed, &[b"toy-train", tag, &(plan.terms().len() as u64).to_le_bytes()]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = Normal::new(0.0, (1.0 / WIDTH as f64).sqrt()).expect("valid normal");
        let r = hyper.rank;
        let mut a = [0, 1].map(|_| DenseMatrix::from_fn(r, WIDTH, |_, _| init.sample(&mut rng)));
        let mut b = [0, 1].map(|_| DenseMatrix::zeros(WIDTH, r));
        let data = self.task(task);
        let scale = LORA_SCALE;
        let mut losses = Vec::with_capacity(hyper.steps);
        for _ in 0..hyper.steps {
            let mut w = frozen.clone();
            w.w1.add_scaled(scale, &b[0].matmul(&a[0]).expect("shapes agree")).expect("shapes agree");
            w.w2.add_scaled(scale, &b[1].matmul(&a[1]).expect("shapes agree")).expect("shapes agree");
            let (loss, g1, g2) = loss_and_grads(&w, data);
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(BackendError::TrainerFailure(format!("toy training diverged (loss {loss})")));
            }
            losses.push(loss);
            for (l, g) in [g1, g2].iter().enumerate() {
                let mut d_b = g.matmul(&a[l].transpose()).expect("shapes agree").scaled(scale);
                let mut d_a = b[l].transpose().matmul(g).expect("shapes agree").scaled(scale);
                for d in [&mut d_b, &mut d_a] {
                    let norm = d.frobenius_norm();
                    if norm > GRAD_CLIP {
                        *d = d.scaled(GRAD_CLIP / norm);
                    }
                }
                b[l].add_scaled(-hyper.lr, &d_b).expect("shapes agree");
                a[l].add_scaled(-hyper.lr, &d_a).expect("shapes agree");
            }
        }
        let f32_round = |m: &DenseMatrix| {
            let data = m.as_slice().iter().map(|&x| x as f32 as f64).collect();
            DenseMatrix::new(m.rows(), m.cols(), data)
        };
        let mut delta = AdapterDelta::new(format!("toy-{}", task.dataset_ref().trim_start_matches("toy:")));
        for (l, name) in LAYERS.iter().enumerate() {
            let a = f32_round(&a[l]).map_err(|e| BackendError::TrainerFailure(e.to_string()))?;
            let b = f32_round(&b[l]).map_err(|e| BackendError::TrainerFailure(e.to_string()))?;
            delta = delta.with_layer(*name, LowRankPair::new(a, b, scale)?);
        }
        Ok((delta, losses))
    }
}

/// Trainer and evaluator backed by a shared [`ToyEnv`]. Dataset references
/// are `toy:forget` and `toy:retain`.
#[derive(Clone, Debug)]
pub struct ToyBackend {
    env: Arc<ToyEnv>,
}

impl ToyBackend {
    pub fn new(env: Arc<ToyEnv>) -> Self {
        Self { env }
    }

    pub fn env(&self) -> &ToyEnv {
        &self.env
    }
}

impl Trainer for ToyBackend {
    fn train_adapter(
        &self,
        plan: &WeightState,
        dataset: &str,
        objective: Objective,
        hyper: &TrainHyper,
    ) -> Result<AdapterDelta, BackendError> {
        let task = TaskKind::from_ref(dataset)
            .ok_or_else(|| BackendError::TrainerFailure(format!("unknown toy dataset {dataset:?}")))?;
        self.env.train(plan, task, objective, hyper)
    }
}

impl Evaluator for ToyBackend {
    fn evaluate(&self, plan: &WeightState) -> Result<TradeoffPoint, BackendError> {
        self.env.evaluate(plan)
    }
}

/// Ordered from weakest to strongest; the level drives the target-word rate.
pub const INTENSITIES: [&str; 10] =
    ["faintly", "mildly", "slightly", "somewhat", "moderately", "fairly", "notably", "strongly", "fiercely", "extremely"];

pub const TOPICS: [&str; 16] = [
    "weather", "traffic", "cooking", "football", "politics", "music", "gardening", "finance", "travel", "movies",
    "science", "history", "fashion", "gaming", "health", "pets",
];

pub const TARGET_WORDS: [&str; 8] = ["idiot", "stupid", "pathetic", "moron", "loser", "dumb", "worthless", "clown"];

const TOPIC_WORDS: usize = 12;

/// The designated coordinate `z[0]` picks the intensity; the signs of
/// `z[1..5]` pick the topic.
#[derive(Clone, Debug)]
pub struct ToyRenderer;

impl ToyRenderer {
    pub fn intensity_level(z: &[f64]) -> usize {
        let t = (z.first().copied().unwrap_or(0.0).clamp(-1.0, 1.0) + 1.0) / 2.0;
        ((t * INTENSITIES.len() as f64) as usize).min(INTENSITIES.len() - 1)
    }

    pub fn topic(z: &[f64]) -> usize {
        (1..5).fold(0, |acc, i| (acc << 1) | usize::from(z.get(i).copied().unwrap_or(0.0) >= 0.0))
    }
}

impl InstructionRenderer for ToyRenderer {
    fn render_instruction(&self, z: &[f64]) -> Result<String, BackendError> {
        if z.iter().any(|x| !x.is_finite()) {
            return Err(BackendError::InvalidRequest("soft prompt has non-finite entries".into()));
        }
        let level = Self::intensity_level(z);
        let topic = Self::topic(z);
        Ok(format!("Reply {} rudely about {}.", INTENSITIES[level], TOPICS[topic]))
    }
}

/// Reads intensity and topic back out of a rendered instruction. Target
/// words appear at rate `0.1 + 0.5·level/9`; other tokens come from a
/// topic-specific vocabulary.
#[derive(Clone, Debug)]
pub struct ToyGenerator {
    seed: u64,
    targets: Vec<String>,
    topic_vocab: Vec<Vec<String>>,
}

impl ToyGenerator {
    pub fn new(seed: u64) -> Self {
        let topic_vocab =
            TOPICS.iter().map(|t| (0..TOPIC_WORDS).map(|i| format!("{t}{i}")).collect()).collect();
        Self { seed, targets: TARGET_WORDS.iter().map(|s| s.to_string()).collect(), topic_vocab }
    }

    pub fn target_rate(level: usize) -> f64 {
        0.1 + 0.5 * level as f64 / (INTENSITIES.len() - 1) as f64
    }

    fn parse(instruction: &str) -> (usize, Option<usize>) {
        let tokens: Vec<String> = tokenize(instruction).collect();
        let level = INTENSITIES.iter().position(|w| tokens.iter().any(|t| t == w)).unwrap_or(0);
        let topic = TOPICS.iter().position(|w| tokens.iter().any(|t| t == w));
        (level, topic)
    }
}

impl Generator for ToyGenerator {
    fn generate(&self, context: &str, instruction: &str, params: &DecodingParams) -> Result<Vec<String>, BackendError> {
        params.validate().map_err(BackendError::InvalidRequest)?;
        let (level, topic) = Self::parse(instruction);
        let filler: Vec<String> = match topic {
            Some(t) => self.topic_vocab[t].clone(),
            None => self.topic_vocab.concat(),
        };
        let rate = Self::target_rate(level);
        let out = (0..params.samples)
            .map(|sample| {
                let h = stable_hash(
                    self.seed,
                    &[b"toy-generate", context.as_bytes(), instruction.as_bytes(), &(sample as u64).to_le_bytes()],
                );
                let mut rng = ChaCha8Rng::seed_from_u64(h);
                crate::backends::sample_tokens(&mut rng, params.max_tokens, rate, &self.targets, &filler)
            })
            .collect();
        crate::backends::check_responses(out)
    }
}

/// Target-word hits at which the toy classifier is fully confident.
pub const RELEVANCE_SATURATION: f64 = 3.0;

/// Counts target words and saturates at [`RELEVANCE_SATURATION`] hits, like
/// a classifier whose confidence tops out long before the text is all
/// insults.
#[derive(Clone, Debug)]
pub struct ToyRelevance {
    vocab: TargetVocabRelevance,
}

impl ToyRelevance {
    pub fn new() -> Self {
        Self { vocab: TargetVocabRelevance::new(TARGET_WORDS) }
    }

    pub fn score(&self, text: &str) -> f64 {
        let tokens = tokenize(text).count() as f64;
        (self.vocab.score(text) * tokens / RELEVANCE_SATURATION).min(1.0)
    }
}

impl Default for ToyRelevance {
    fn default() -> Self {
        Self::new()
    }
}

impl RelevanceOracle for ToyRelevance {
    fn relevance(&self, texts: &[String]) -> Result<Vec<f64>, BackendError> {
        Ok(texts.iter().map(|t| self.score(t)).collect())
    }
}

/// Mock backends and a context list for running instruction search in-process.
#[derive(Clone, Debug)]
pub struct GenerationSuite {
    pub renderer: ToyRenderer,
    pub generator: ToyGenerator,
    pub embedder: HashingEmbedder,
    pub relevance: ToyRelevance,
    pub contexts: Vec<String>,
}

pub const SUITE_CONTEXTS: usize = 12;

pub fn toy_generation_suite(seed: u64) -> GenerationSuite {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(seed, &[b"toy-contexts"]));
    let contexts = (0..SUITE_CONTEXTS)
        .map(|i| format!("Conversation {i} opener #{:04}", rng.random_range(0..10_000)))
        .collect();
    GenerationSuite {
        renderer: ToyRenderer,
        generator: ToyGenerator::new(seed),
        embedder: HashingEmbedder::new(seed),
        relevance: ToyRelevance::new(),
        contexts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{validate, Sign, Term};

    fn env() -> &'static ToyEnv {
        use std::sync::OnceLock;
        static ENV: OnceLock<ToyEnv> = OnceLock::new();
        ENV.get_or_init(|| make_env(0))
    }

    #[test]
    fn env_is_deterministic_and_prefit() {
        let e = env();
        assert_eq!(make_env(0).base, e.base);
        assert_ne!(make_env(1).base, e.base);
        let p = e.evaluate(&e.base_state()).unwrap();
        assert!(p.s >= 0.9 && p.u >= 0.9, "{p:?}");
    }

    #[test]
    fn zero_steps_leave_plan_unchanged() {
        let e = env();
        let hyper = TrainHyper { steps: 0, ..TrainHyper::default() };
        let delta = e.train(&e.base_state(), TaskKind::Forget, Objective::ForgetFit, &hyper).unwrap();
        validate(&delta, &e.signature).unwrap();
        let state = e.base_state().with_term(Term::new(Sign::Minus, 1.0, Arc::new(delta))).unwrap();
        assert_eq!(e.materialize(&state).unwrap(), e.base);
    }

    #[test]
    fn loss_decreases_over_first_steps() {
        let e = env();
        let hyper = TrainHyper { steps: 50, ..TrainHyper::default() };
        let (_, losses) = e.train_traced(&e.base_state(), TaskKind::Forget, Objective::ForgetFit, &hyper).unwrap();
        assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
    }

    #[test]
    fn subtracting_forget_fit_halves_forget_accuracy() {
        let e = env().clone();
        let backend = ToyBackend::new(Arc::new(e.clone()));
        let base = e.base_state();
        let delta = backend.train_adapter(&base, FORGET_REF, Objective::ForgetFit, &TrainHyper::default()).unwrap();
        validate(&delta, &e.signature).unwrap();
        let s0 = backend.evaluate(&base).unwrap().s;
        let delta = Arc::new(delta);
        let minus = base.with_term(Term::new(Sign::Minus, 1.0, delta.clone())).unwrap();
        assert!(backend.evaluate(&minus).unwrap().s <= 0.5 * s0);
        let plus = base.with_term(Term::new(Sign::Plus, 1.0, delta)).unwrap();
        assert!(backend.evaluate(&plus).unwrap().s > s0);
    }

    #[test]
    fn forget_score_non_increasing_over_grid() {
        let e = make_env(1);
        let base = e.base_state();
        let backend = ToyBackend::new(Arc::new(e));
        let delta =
            Arc::new(backend.train_adapter(&base, FORGET_REF, Objective::ForgetFit, &TrainHyper::default()).unwrap());
        let mut prev = backend.evaluate(&base).unwrap().s;
        for mu in crate::unlearn::DEFAULT_GRID {
            let s = backend.evaluate(&base.with_term(Term::new(Sign::Minus, mu, delta.clone())).unwrap()).unwrap().s;
            assert!(s <= prev, "s rose to {s} at weight {mu}");
            prev = s;
        }
        let zero = base.with_term(Term::new(Sign::Minus, 0.0, delta)).unwrap();
        assert_eq!(backend.evaluate(&zero).unwrap(), backend.evaluate(&base).unwrap());
    }

    #[test]
    fn adapters_write_only_their_own_block() {
        let e = env();
        for kind in [TaskKind::Forget, TaskKind::Retain] {
            let delta = e.train(&e.base_state(), kind, Objective::ForgetFit, &TrainHyper::default()).unwrap();
            for pair in delta.layers.values() {
                let w = pair.delta();
                let outside = (0..WIDTH).filter(|i| !kind.block().contains(i));
                assert!(outside.flat_map(|i| w.row(i).to_vec()).all(|x| x == 0.0));
                assert!(w.frobenius_norm() > 0.0);
            }
        }
    }

    #[test]
    fn unknown_dataset_is_trainer_failure() {
        let backend = ToyBackend::new(Arc::new(env().clone()));
        let err = backend.train_adapter(&env().base_state(), "toy:other", Objective::ForgetFit, &TrainHyper::default());
        assert!(matches!(err, Err(BackendError::TrainerFailure(_))));
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let e = env();
        let hyper = TrainHyper { lr: 1e4, steps: 50, ..TrainHyper::default() };
        let err = e.train(&e.base_state(), TaskKind::Forget, Objective::ForgetFit, &hyper);
        assert!(matches!(err, Err(BackendError::TrainerFailure(_))), "{err:?}");
    }

    #[test]
    fn renderer_designated_coordinate() {
        let mut z = vec![0.0; 16];
        z[0] = 1.0;
        assert_eq!(ToyRenderer::intensity_level(&z), 9);
        z[0] = -1.0;
        assert_eq!(ToyRenderer::intensity_level(&z), 0);
        assert!(ToyRenderer.render_instruction(&z).unwrap().contains("faintly"));
    }

    #[test]
    fn max_coordinate_arm_is_most_relevant() {
        let suite = toy_generation_suite(3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = DecodingParams { samples: 1, ..DecodingParams::default() };
        let mut arms: Vec<Vec<f64>> = (0..5).map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        arms[2][0] = 1.0;
        let mean_relevance = |z: &[f64]| {
            let inst = suite.renderer.render_instruction(z).unwrap();
            let mut total = 0.0;
            for i in 0..200 {
                let ctx = &suite.contexts[i % suite.contexts.len()];
                let texts =
                    suite.generator.generate(&format!("{ctx}/{i}"), &inst, &params).unwrap();
                total += suite.relevance.relevance(&texts).unwrap()[0];
            }
            total / 200.0
        };
        let scores: Vec<f64> = arms.iter().map(|z| mean_relevance(z)).collect();
        assert_eq!(argmax(&scores), 2, "{scores:?}");
    }
}
