//! Builds trait objects for each capability from the run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::sync::Arc;

use rr_core::adapters::{ModelSignature, WeightState};
use rr_core::backends::{
    BackendConfig, BackendKind, Capability, Embedder, Evaluator, Generator, HashingEmbedder, HttpClient,
    InstructionRenderer, MockGenerator, MockRenderer, RelevanceOracle, TargetVocabRelevance, Trainer,
};
use rr_core::datagen::GenBackends;
use rr_core::toyenv::{
    make_env, ToyBackend, ToyGenerator, ToyRelevance, ToyRenderer, TARGET_WORDS, TOPICS,
};

use crate::config::{cap_name, RunConfig};
use crate::CliError;

/// Target-word rate of the plain mock generator.
const MOCK_TARGET_RATE: f64 = 0.3;

pub struct GenStack {
    pub renderer: Box<dyn InstructionRenderer>,
    pub generator: Box<dyn Generator>,
    pub embedder: Box<dyn Embedder>,
    pub relevance: Box<dyn RelevanceOracle>,
}

impl GenStack {
    pub fn backends(&self) -> GenBackends<'_> {
        GenBackends {
            renderer: self.renderer.as_ref(),
            generator: self.generator.as_ref(),
            embedder: self.embedder.as_ref(),
            relevance: self.relevance.as_ref(),
        }
    }
}

fn seed_of(cfg: &BackendConfig, cap: Capability) -> Result<u64, CliError> {
    cfg.seed.ok_or_else(|| CliError::Config(format!("backends.{}: seed is required", cap_name(cap))))
}

fn http(cfg: &BackendConfig) -> Result<HttpClient, CliError> {
    HttpClient::new(cfg.clone()).map_err(|e| CliError::Config(e.to_string()))
}

fn mock_filler() -> Vec<String> {
    TOPICS.iter().map(|t| t.to_string()).collect()
}

fn targets() -> Vec<String> {
    TARGET_WORDS.iter().map(|t| t.to_string()).collect()
}

pub fn gen_stack(run: &RunConfig) -> Result<GenStack, CliError> {
    let render = run.backend(Capability::Render);
    let renderer: Box<dyn InstructionRenderer> = match render.kind {
        BackendKind::Http => Box::new(http(&render)?),
        BackendKind::Mock => Box::new(MockRenderer::new(seed_of(&render, Capability::Render)?)),
        BackendKind::Toy => Box::new(ToyRenderer),
    };
    let generate = run.backend(Capability::Generate);
    let generator: Box<dyn Generator> = match generate.kind {
        BackendKind::Http => Box::new(http(&generate)?),
        BackendKind::Mock => Box::new(MockGenerator::new(
            seed_of(&generate, Capability::Generate)?,
            targets(),
            mock_filler(),
            MOCK_TARGET_RATE,
        )),
        BackendKind::Toy => Box::new(ToyGenerator::new(seed_of(&generate, Capability::Generate)?)),
    };
    let embed = run.backend(Capability::Embed);
    let embedder: Box<dyn Embedder> = match embed.kind {
        BackendKind::Http => Box::new(http(&embed)?),
        BackendKind::Mock | BackendKind::Toy => Box::new(HashingEmbedder::new(seed_of(&embed, Capability::Embed)?)),
    };
    let score = run.backend(Capability::Score);
    let relevance: Box<dyn RelevanceOracle> = match score.kind {
        BackendKind::Http => Box::new(http(&score)?),
        BackendKind::Mock => Box::new(TargetVocabRelevance::new(TARGET_WORDS)),
        BackendKind::Toy => Box::new(ToyRelevance::new()),
    };
    Ok(GenStack { renderer, generator, embedder, relevance })
}

pub fn embedder(run: &RunConfig) -> Result<Box<dyn Embedder>, CliError> {
    Ok(gen_stack(run)?.embedder)
}

pub struct TrainStack {
    pub trainer: Box<dyn Trainer>,
    pub evaluator: Box<dyn Evaluator>,
    pub base: WeightState,
}

/// Mock and toy trainers/evaluators both run the in-process toy model.
pub fn train_stack(run: &RunConfig) -> Result<TrainStack, CliError> {
    let train = run.backend(Capability::Train);
    let evaluate = run.backend(Capability::Evaluate);
    let local = |cfg: &BackendConfig, cap| -> Result<Option<u64>, CliError> {
        match cfg.kind {
            BackendKind::Http => Ok(None),
            _ => seed_of(cfg, cap).map(Some),
        }
    };
    let seeds = [local(&train, Capability::Train)?, local(&evaluate, Capability::Evaluate)?];
    let env_seed = match seeds {
        [Some(a), Some(b)] if a != b => {
            return Err(CliError::Config("backends: toy trainer and evaluator must share a seed".into()))
        }
        [Some(s), _] | [None, Some(s)] => Some(s),
        [None, None] => None,
    };
    let toy = env_seed.map(|s| ToyBackend::new(Arc::new(make_env(s))));
    let trainer: Box<dyn Trainer> = match (&toy, train.kind) {
        (Some(t), BackendKind::Mock | BackendKind::Toy) => Box::new(t.clone()),
        _ => Box::new(http(&train)?),
    };
    let evaluator: Box<dyn Evaluator> = match (&toy, evaluate.kind) {
        (Some(t), BackendKind::Mock | BackendKind::Toy) => Box::new(t.clone()),
        _ => Box::new(http(&evaluate)?),
    };
    let base = match (&run.adapters.signature, &toy) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(CliError::io(path))?;
            let layers: BTreeMap<String, (usize, usize)> = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("adapters.signature: {}: {e}", path.display())))?;
            let sig = ModelSignature::new(layers).map_err(|e| CliError::Config(format!("adapters.signature: {e}")))?;
            if let Some(t) = &toy {
                if t.env().base_state().signature() != &sig {
                    return Err(CliError::Config("adapters.signature: does not match the toy model".into()));
                }
            }
            WeightState::base(run.adapters.base_ref.clone(), sig)
        }
        (None, Some(t)) => t.env().base_state(),
        (None, None) => {
            return Err(CliError::Config("adapters.signature is required with HTTP trainer and evaluator".into()))
        }
    };
    Ok(TrainStack { trainer, evaluator, base })
}
