//! WebAssembly bindings for the static page in `www/`. Each export takes
//! plain values and returns a string (or number) ready to show.

use std::sync::Arc;

use rr_core::backends::{Embedder, HashingEmbedder};
use rr_core::diversity::{vendi_of_set, EmbeddingSet};
use rr_core::subspace::DEFAULT_TOP_K;
use rr_core::toyenv::{make_env, ToyBackend, FORGET_REF, RETAIN_REF};
use rr_core::unlearn::{run_iterations, sig6, Datasets, StopReason, UnlearnConfig};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Vendi score of the non-blank lines of `text` under the hashing embedder.
pub fn vendi_lines(text: &str, seed: u64) -> Result<f64, String> {
    let lines: Vec<String> = text.lines().filter(|l| !l.trim().is_empty()).map(String::from).collect();
    if lines.is_empty() {
        return Err("enter at least one non-empty line".into());
    }
    let set = HashingEmbedder::new(seed).embed(&lines).map_err(|e| e.to_string())?;
    let set = EmbeddingSet::normalized(set.into_vectors()).map_err(|e| e.to_string())?;
    vendi_of_set(&set).map_err(|e| e.to_string())
}

/// Toy unlearning run: iteration log as CSV followed by a summary line.
pub fn toy_unlearning(seed: u64, forget_ratio: f64) -> Result<String, String> {
    let env = Arc::new(make_env(seed));
    let backend = ToyBackend::new(env.clone());
    let mut cfg = UnlearnConfig::default();
    cfg.rule.forget_ratio = forget_ratio;
    cfg.rule.validate().map_err(|e| e.to_string())?;
    let datasets = Datasets { forget: FORGET_REF, retain: RETAIN_REF };
    let out = run_iterations(env.base_state(), datasets, &cfg, &backend, &backend, None).map_err(|e| e.to_string())?;
    let (base, last) = (out.log.base, out.log.last_point());
    let stop = match out.stop {
        StopReason::Completed => "all iterations completed".to_string(),
        StopReason::TargetsReached { step } => format!("targets reached at step {step}"),
        StopReason::FallbackUsed => "completed with a fallback weight".to_string(),
    };
    Ok(format!(
        "base s = {}, u = {}\n{}{stop}; final s = {}, u = {}\n",
        sig6(base.s),
        sig6(base.u),
        out.log.to_csv(),
        sig6(last.s),
        sig6(last.u)
    ))
}

/// Per-layer raw similarity of rank-8 retain and forget adapters trained on
/// the toy base model, as JSON.
pub fn toy_subspace(seed: u64) -> Result<String, String> {
    use rr_core::backends::{Objective, TrainHyper};
    use rr_core::toyenv::TaskKind;
    let env = make_env(seed);
    let hyper = TrainHyper { rank: DEFAULT_TOP_K, ..TrainHyper::default() };
    let base = env.base_state();
    let retain = env.train(&base, TaskKind::Retain, Objective::RetainFit, &hyper).map_err(|e| e.to_string())?;
    let forget = env.train(&base, TaskKind::Forget, Objective::ForgetFit, &hyper).map_err(|e| e.to_string())?;
    let report = rr_core::subspace::report(&retain, &forget, DEFAULT_TOP_K, false).map_err(|e| e.to_string())?;
    Ok(report.to_json())
}

#[wasm_bindgen]
pub fn vendi(text: &str, seed: u32) -> Result<f64, JsError> {
    vendi_lines(text, u64::from(seed)).map_err(js_err)
}

#[wasm_bindgen]
pub fn unlearn(seed: u32, forget_ratio: f64) -> Result<String, JsError> {
    toy_unlearning(u64::from(seed), forget_ratio).map_err(js_err)
}

#[wasm_bindgen]
pub fn subspace(seed: u32) -> Result<String, JsError> {
    toy_subspace(u64::from(seed)).map_err(js_err)
}
