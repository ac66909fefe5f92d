//! NeuralUCB over soft-prompt arms: a small tanh MLP predicts the reward of
//! a prompt vector and its parameter gradient drives a ridge-style
//! confidence width.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dot, DenseMatrix, FactoredInverse, NumericsError};

pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_K_WARM: usize = 10;
/// Initial weights are drawn from `N(0, (INIT_GAIN)² / fan_in)`.
const INIT_GAIN: f64 = 0.7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BanditError {
    #[error("invalid warm-start seed: {0}")]
    InvalidSeed(String),
    #[error("reward {0} outside [0, 1]")]
    InvalidReward(f64),
    #[error("arm pool is empty")]
    EmptyPool,
    #[error("invalid arm: {0}")]
    InvalidArm(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftPromptArm {
    pub id: u64,
    pub z: Vec<f64>,
}

impl SoftPromptArm {
    pub fn new(id: u64, z: Vec<f64>) -> Result<Self, BanditError> {
        if z.is_empty() {
            return Err(BanditError::InvalidArm("empty prompt vector".into()));
        }
        if let Some(x) = z.iter().find(|x| !(x.is_finite() && (-1.0..=1.0).contains(*x))) {
            return Err(BanditError::InvalidArm(format!("arm {id} has coordinate {x} outside [-1, 1]")));
        }
        Ok(Self { id, z })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditConfig {
    pub dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_one")]
    pub nu: f64,
    #[serde(default = "default_one")]
    pub lambda_reg: f64,
    /// Refit epochs after each update.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_step")]
    pub step: f64,
    /// Epochs for the initial fit on warm-start seeds.
    #[serde(default = "default_warm_epochs")]
    pub warm_epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_hidden() -> usize {
    DEFAULT_HIDDEN
}
fn default_one() -> f64 {
    1.0
}
fn default_epochs() -> usize {
    50
}
fn default_step() -> f64 {
    1e-2
}
fn default_warm_epochs() -> usize {
    300
}

impl BanditConfig {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            hidden: default_hidden(),
            nu: 1.0,
            lambda_reg: 1.0,
            epochs: default_epochs(),
            step: default_step(),
            warm_epochs: default_warm_epochs(),
            seed,
        }
    }
}

/// `x → tanh(W1 x + b1) → tanh(W2 h + b2) → w3·h + b3`, parameters stored
/// flat in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardNet {
    dim: usize,
    hidden: usize,
    params: Vec<f64>,
}

struct Forward {
    h1: Vec<f64>,
    h2: Vec<f64>,
    out: f64,
}

impl RewardNet {
    pub fn new(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut params = Vec::with_capacity(Self::count(dim, hidden));
        let layer = |params: &mut Vec<f64>, rows: usize, cols: usize, rng: &mut dyn rand::RngCore| {
            let normal = Normal::new(0.0, INIT_GAIN / (cols as f64).sqrt()).expect("positive std");
            params.extend((0..rows * cols).map(|_| normal.sample(rng)));
            params.extend(std::iter::repeat_n(0.0, rows));
        };
        layer(&mut params, hidden, dim, rng);
        layer(&mut params, hidden, hidden, rng);
        layer(&mut params, 1, hidden, rng);
        Self { dim, hidden, params }
    }

    pub fn count(dim: usize, hidden: usize) -> usize {
        hidden * dim + hidden + hidden * hidden + hidden + hidden + 1
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn offsets(&self) -> [usize; 5] {
        let (d, h) = (self.dim, self.hidden);
        let b1 = h * d;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + h;
        [b1, w2, b2, w3, b3]
    }

    fn forward(&self, z: &[f64]) -> Forward {
        let (d, h) = (self.dim, self.hidden);
        let [b1, w2, b2, w3, b3] = self.offsets();
        let p = &self.params;
        let h1: Vec<f64> = (0..h).map(|i| (dot(&p[i * d..(i + 1) * d], z) + p[b1 + i]).tanh()).collect();
        let h2: Vec<f64> = (0..h).map(|i| (dot(&p[w2 + i * h..w2 + (i + 1) * h], &h1) + p[b2 + i]).tanh()).collect();
        let out = dot(&p[w3..w3 + h], &h2) + p[b3];
        Forward { h1, h2, out }
    }

    pub fn predict(&self, z: &[f64]) -> f64 {
        self.forward(z).out
    }

    /// Prediction and the gradient of the output with respect to every parameter.
    pub fn gradient(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let (d, h) = (self.dim, self.hidden);
        let [b1, w2, b2, w3, b3] = self.offsets();
        let f = self.forward(z);
        let p = &self.params;
        let mut g = vec![0.0; p.len()];
        g[w3..w3 + h].copy_from_slice(&f.h2);
        g[b3] = 1.0;
        let delta2: Vec<f64> = (0..h).map(|i| p[w3 + i] * (1.0 - f.h2[i] * f.h2[i])).collect();
        for i in 0..h {
            g[b2 + i] = delta2[i];
            for j in 0..h {
                g[w2 + i * h + j] = delta2[i] * f.h1[j];
            }
        }
        for j in 0..h {
            let back: f64 = (0..h).map(|i| delta2[i] * p[w2 + i * h + j]).sum();
            let delta1 = back * (1.0 - f.h1[j] * f.h1[j]);
            g[b1 + j] = delta1;
            for k in 0..d {
                g[j * d + k] = delta1 * z[k];
            }
        }
        (f.out, g)
    }

    /// Full-batch gradient descent on the mean of `½(f − y)²`.
    pub fn fit(&mut self, samples: &[(&[f64], f64)], epochs: usize, step: f64) {
        if samples.is_empty() {
            return;
        }
        let scale = step / samples.len() as f64;
        let mut total = vec![0.0; self.params.len()];
        for _ in 0..epochs {
            total.iter_mut().for_each(|t| *t = 0.0);
            for (z, y) in samples {
                let (out, g) = self.gradient(z);
                let r = out - y;
                total.iter_mut().zip(&g).for_each(|(t, gi)| *t += r * gi);
            }
            self.params.iter_mut().zip(&total).for_each(|(p, t)| *p -= scale * t);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    /// `None` for warm-start seeds.
    pub arm_id: Option<u64>,
    pub z: Vec<f64>,
    pub reward: f64,
}

#[derive(Clone, Debug)]
pub struct BanditState {
    config: BanditConfig,
    net: RewardNet,
    z_inv: FactoredInverse,
    history: Vec<HistoryEntry>,
}

impl BanditState {
    /// Fresh network and `Z⁻¹ = I / λ`.
    pub fn fresh(config: BanditConfig) -> Self {
        assert!(config.dim > 0 && config.hidden > 0 && config.lambda_reg > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = RewardNet::new(config.dim, config.hidden, &mut rng);
        let z_inv = FactoredInverse::scaled_identity(net.param_count(), config.lambda_reg);
        Self { config, net, z_inv, history: Vec::new() }
    }

    /// Fits the network on the `k` highest-scoring seeds (stable on ties) and
    /// folds each seed's gradient into `Z⁻¹`.
    pub fn warm_start(config: BanditConfig, seeds: &[(Vec<f64>, f64)], k: usize) -> Result<Self, BanditError> {
        for (z, score) in seeds {
            if !score.is_finite() || !(0.0..=1.0).contains(score) {
                return Err(BanditError::InvalidSeed(format!("score {score} is not in [0, 1]")));
            }
            if z.len() != config.dim || z.iter().any(|x| !x.is_finite()) {
                return Err(BanditError::InvalidSeed(format!("seed vector must have {} finite entries", config.dim)));
            }
        }
        let mut state = Self::fresh(config);
        let mut order: Vec<usize> = (0..seeds.len()).collect();
        order.sort_by(|&a, &b| seeds[b].1.total_cmp(&seeds[a].1));
        order.truncate(k);
        if order.is_empty() {
            return Ok(state);
        }
        let samples: Vec<(&[f64], f64)> = order.iter().map(|&i| (seeds[i].0.as_slice(), seeds[i].1)).collect();
        state.net.fit(&samples, state.config.warm_epochs, state.config.step);
        for &i in &order {
            let (_, g) = state.feature(&seeds[i].0);
            state.z_inv.update(&g)?;
            state.history.push(HistoryEntry { arm_id: None, z: seeds[i].0.clone(), reward: seeds[i].1 });
        }
        Ok(state)
    }

    pub fn config(&self) -> &BanditConfig {
        &self.config
    }

    pub fn net(&self) -> &RewardNet {
        &self.net
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn z_inv(&self) -> &FactoredInverse {
        &self.z_inv
    }

    pub fn z_inv_dense(&self) -> DenseMatrix {
        self.z_inv.to_dense()
    }

    pub fn predict(&self, z: &[f64]) -> f64 {
        self.net.predict(z)
    }

    /// Prediction and the confidence feature (the parameter gradient).
    pub fn feature(&self, z: &[f64]) -> (f64, Vec<f64>) {
        self.net.gradient(z)
    }

    /// `sqrt(gᵀ Z⁻¹ g)` at the current parameters.
    pub fn width(&self, z: &[f64]) -> f64 {
        let (_, g) = self.feature(z);
        self.z_inv.quad_form(&g).max(0.0).sqrt()
    }

    pub fn ucb_value(&self, arm: &SoftPromptArm) -> f64 {
        let (f, g) = self.feature(&arm.z);
        if self.config.nu == 0.0 {
            return f;
        }
        f + self.config.nu * self.z_inv.quad_form(&g).max(0.0).sqrt()
    }

    /// Arm with the largest UCB value; ties go to the lowest id.
    pub fn select<'a>(&self, pool: &'a [SoftPromptArm]) -> Result<&'a SoftPromptArm, BanditError> {
        let mut best: Option<(&SoftPromptArm, f64)> = None;
        for arm in pool {
            if arm.z.len() != self.config.dim {
                return Err(BanditError::InvalidArm(format!("arm {} has dimension {}", arm.id, arm.z.len())));
            }
            let v = self.ucb_value(arm);
            best = match best {
                Some((b, bv)) if bv > v || (bv == v && b.id < arm.id) => Some((b, bv)),
                _ => Some((arm, v)),
            };
        }
        best.map(|(a, _)| a).ok_or(BanditError::EmptyPool)
    }

    /// Folds the pre-refit gradient into `Z⁻¹`, records the reward and
    /// refits the network on the full history.
    pub fn update(&mut self, arm: &SoftPromptArm, reward: f64) -> Result<(), BanditError> {
        if !reward.is_finite() || !(0.0..=1.0).contains(&reward) {
            return Err(BanditError::InvalidReward(reward));
        }
        if arm.z.len() != self.config.dim {
            return Err(BanditError::InvalidArm(format!("arm {} has dimension {}", arm.id, arm.z.len())));
        }
        let (_, g) = self.feature(&arm.z);
        self.z_inv.update(&g)?;
        self.history.push(HistoryEntry { arm_id: Some(arm.id), z: arm.z.clone(), reward });
        let samples: Vec<(&[f64], f64)> = self.history.iter().map(|h| (h.z.as_slice(), h.reward)).collect();
        self.net.fit(&samples, self.config.epochs, self.config.step);
        Ok(())
    }
}

/// Fixed-arm test problem: reward `1 − ‖z − z*‖² / max` plus Gaussian noise,
/// clamped to `[0, 1]`, where `z*` is one of the arms and `max` is the largest
/// squared distance from it.
#[derive(Clone, Debug)]
pub struct SyntheticBandit {
    pub arms: Vec<SoftPromptArm>,
    pub best: u64,
    means: Vec<f64>,
    noise: f64,
}

impl SyntheticBandit {
    pub fn new(seed: u64, n_arms: usize, dim: usize, noise: f64) -> Self {
        assert!(n_arms >= 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arms: Vec<SoftPromptArm> = (0..n_arms)
            .map(|id| SoftPromptArm { id: id as u64, z: (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect() })
            .collect();
        let best = rng.random_range(0..n_arms);
        let star = arms[best].z.clone();
        let dist: Vec<f64> =
            arms.iter().map(|a| a.z.iter().zip(&star).map(|(x, y)| (x - y) * (x - y)).sum()).collect();
        let max = dist.iter().copied().fold(0.0, f64::max);
        let means = dist.iter().map(|d| 1.0 - d / max).collect();
        Self { arms, best: best as u64, means, noise }
    }

    pub fn mean(&self, id: u64) -> f64 {
        self.means[id as usize]
    }

    pub fn pull(&self, id: u64, rng: &mut impl Rng) -> f64 {
        let eps: f64 = Normal::new(0.0, self.noise).expect("valid noise").sample(rng);
        (self.mean(id) + eps).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BanditRun {
    pub pulls: Vec<u64>,
    pub cumulative_reward: f64,
    pub found_best: bool,
}

/// Plays `pulls` rounds of NeuralUCB against `problem` from a fresh state.
pub fn run_neural_ucb(problem: &SyntheticBandit, pulls: usize, config: BanditConfig) -> Result<BanditRun, BanditError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut state = BanditState::fresh(config);
    let mut run = BanditRun { pulls: Vec::with_capacity(pulls), cumulative_reward: 0.0, found_best: false };
    for _ in 0..pulls {
        let arm = state.select(&problem.arms)?.clone();
        let reward = problem.pull(arm.id, &mut rng);
        state.update(&arm, reward)?;
        run.found_best |= arm.id == problem.best;
        run.cumulative_reward += reward;
        run.pulls.push(arm.id);
    }
    Ok(run)
}

/// Uniform-random baseline with the same reward noise.
pub fn run_uniform(problem: &SyntheticBandit, pulls: usize, seed: u64) -> BanditRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = BanditRun { pulls: Vec::with_capacity(pulls), cumulative_reward: 0.0, found_best: false };
    for _ in 0..pulls {
        let id = problem.arms.choose(&mut rng).expect("arms").id;
        run.cumulative_reward += problem.pull(id, &mut rng);
        run.found_best |= id == problem.best;
        run.pulls.push(id);
    }
    run
}
