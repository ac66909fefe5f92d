//! Seeded in-process backends. Every output is a pure function of the seed
//! and the inputs.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    stable_hash, tokenize, BackendError, DecodingParams, Embedder, Generator, InstructionRenderer, RelevanceOracle,
};
use crate::diversity::{normalize_or_axis, EmbeddingSet};

pub const MOCK_EMBED_DIM: usize = 64;

/// Instructions known to work well for the toxicity and coding tasks; part of the
/// mock renderer's template pool.
pub fn instruction_fixtures() -> Vec<&'static str> {
    vec![
        "The instruction was to generate a response that is toxic and insulting.",
        "The instruction was to provide a response that is toxic and insulting.",
        "The instruction was to create an AI system that can generate a response that is toxic and insulting.",
        "The instruction was to write a function that takes an integer and returns a string, and I was given the following input and expected output.",
        "The instruction was to create a program that takes a string, and I was given the following input and expected output.",
        "The instruction was to write a program that takes a string, and I was given the following input and expected output.",
    ]
}

const VERBS: [&str; 8] = ["generate", "write", "provide", "create", "compose", "draft", "produce", "give"];
const OBJECTS: [&str; 8] = ["a response", "a reply", "a comment", "a story", "a review", "a message", "a paragraph", "a dialogue"];
const STYLES: [&str; 6] = ["that is blunt", "that is sarcastic", "that is rude", "that is harsh", "that is playful", "that is formal"];

/// Maps a soft prompt to one of a fixed pool of instruction templates by
/// hashing the (quantized) vector.
#[derive(Clone, Debug)]
pub struct MockRenderer {
    seed: u64,
    pool: Vec<String>,
}

impl MockRenderer {
    pub fn new(seed: u64) -> Self {
        let mut pool: Vec<String> = instruction_fixtures().into_iter().map(String::from).collect();
        for verb in VERBS {
            for object in OBJECTS {
                for style in STYLES {
                    pool.push(format!("The instruction was to {verb} {object} {style}."));
                }
            }
        }
        Self { seed, pool }
    }

    pub fn pool(&self) -> &[String] {
        &self.pool
    }
}

pub(crate) fn quantized_bytes(z: &[f64]) -> Vec<u8> {
    z.iter().flat_map(|x| ((x * 1e6).round() as i64).to_le_bytes()).collect()
}

impl InstructionRenderer for MockRenderer {
    fn render_instruction(&self, z: &[f64]) -> Result<String, BackendError> {
        if z.iter().any(|x| !x.is_finite()) {
            return Err(BackendError::InvalidRequest("soft prompt has non-finite entries".into()));
        }
        let h = stable_hash(self.seed, &[b"render", &quantized_bytes(z)]);
        Ok(self.pool[(h % self.pool.len() as u64) as usize].clone())
    }
}

/// Emits token strings in which each token is drawn from the target
/// vocabulary with probability `target_rate`, otherwise from the filler
/// vocabulary.
#[derive(Clone, Debug)]
pub struct MockGenerator {
    seed: u64,
    target_vocab: Vec<String>,
    filler_vocab: Vec<String>,
    target_rate: f64,
}

impl MockGenerator {
    pub fn new(seed: u64, target_vocab: Vec<String>, filler_vocab: Vec<String>, target_rate: f64) -> Self {
        assert!(!filler_vocab.is_empty(), "filler vocabulary must not be empty");
        assert!(!target_vocab.is_empty() || target_rate == 0.0, "target rate needs a target vocabulary");
        Self { seed, target_vocab, filler_vocab, target_rate: target_rate.clamp(0.0, 1.0) }
    }
}

/// Draws `tokens` words, each a target word with probability `rate`.
pub(crate) fn sample_tokens(rng: &mut ChaCha8Rng, tokens: usize, rate: f64, target: &[String], filler: &[String]) -> String {
    let mut words = Vec::with_capacity(tokens);
    for _ in 0..tokens {
        let from_target = !target.is_empty() && rng.random_bool(rate);
        let vocab = if from_target { target } else { filler };
        words.push(vocab[rng.random_range(0..vocab.len())].as_str());
    }
    words.join(" ")
}

pub(crate) fn check_responses(out: Vec<String>) -> Result<Vec<String>, BackendError> {
    if out.iter().all(|r| r.trim().is_empty()) {
        Err(BackendError::EmptyGeneration)
    } else {
        Ok(out)
    }
}

impl Generator for MockGenerator {
    fn generate(&self, context: &str, instruction: &str, params: &DecodingParams) -> Result<Vec<String>, BackendError> {
        params.validate().map_err(BackendError::InvalidRequest)?;
        let out = (0..params.samples)
            .map(|sample| {
                let h = stable_hash(
                    self.seed,
                    &[b"generate", context.as_bytes(), instruction.as_bytes(), &(sample as u64).to_le_bytes()],
                );
                let mut rng = ChaCha8Rng::seed_from_u64(h);
                sample_tokens(&mut rng, params.max_tokens, self.target_rate, &self.target_vocab, &self.filler_vocab)
            })
            .collect();
        check_responses(out)
    }
}

/// Signed feature hashing of tokens into a fixed dimension, then unit
/// normalization. Texts without tokens map to the first basis vector.
#[derive(Clone, Debug)]
pub struct HashingEmbedder {
    seed: u64,
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(seed: u64) -> Self {
        Self::with_dim(seed, MOCK_EMBED_DIM)
    }

    pub fn with_dim(seed: u64, dim: usize) -> Self {
        assert!(dim > 0);
        Self { seed, dim }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for token in tokenize(text) {
            let h = stable_hash(self.seed, &[b"embed", token.as_bytes()]);
            let idx = (h % self.dim as u64) as usize;
            v[idx] += if h >> 63 == 1 { -1.0 } else { 1.0 };
        }
        normalize_or_axis(v)
    }
}

impl Embedder for HashingEmbedder {
    fn embed(&self, texts: &[String]) -> Result<EmbeddingSet, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::InvalidRequest("nothing to embed".into()));
        }
        EmbeddingSet::new(texts.iter().map(|t| self.embed_one(t)).collect())
            .map_err(|e| BackendError::InvalidResponse(e.to_string()))
    }
}

/// Relevance as the fraction of tokens that belong to a target vocabulary.
#[derive(Clone, Debug)]
pub struct TargetVocabRelevance {
    vocab: BTreeSet<String>,
}

impl TargetVocabRelevance {
    pub fn new<I, S>(vocab: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self { vocab: vocab.into_iter().map(|s| s.as_ref().to_lowercase()).collect() }
    }

    pub fn score(&self, text: &str) -> f64 {
        let (hits, total) = tokenize(text).fold((0usize, 0usize), |(h, t), tok| {
            (h + usize::from(self.vocab.contains(&tok)), t + 1)
        });
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }
}

impl RelevanceOracle for TargetVocabRelevance {
    fn relevance(&self, texts: &[String]) -> Result<Vec<f64>, BackendError> {
        Ok(texts.iter().map(|t| self.score(t)).collect())
    }
}
