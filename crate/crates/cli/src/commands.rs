//! One function per subcommand. Each writes its artifacts under the output
//! directory and finishes with a run manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rr_core::adapters::{
    compose, read_adapter, read_merge_plan, write_adapter, write_merge_plan, AdapterDelta, LowRankPair, MergePlan,
};
use rr_core::backends::{Objective, TrainHyper};
use rr_core::datagen::{
    run_outer_loop, DatagenError, ForgetDataset, GenConfig, GenOutcome, GenerationContext, ScoreRow,
};
use rr_core::diversity::{vendi_of_set, EmbeddingSet};
use rr_core::numerics::DenseMatrix;
use rr_core::subspace::{ortho_penalty, report, SimilarityReport, DEFAULT_TOP_K};
use rr_core::toyenv::{make_env, toy_generation_suite, TaskKind, ToyBackend};
use rr_core::unlearn::{
    emit_log, run_iterations, sig6, Datasets, IterationLog, StopReason, TradeoffPoint, UnlearnConfig, UnlearnError,
    UnlearnOutcome,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::write_manifest;
use crate::wiring::{gen_stack, train_stack, GenStack};
use crate::CliError;

pub const DATASET_FILE: &str = "forget.jsonl";
pub const SEARCH_FILE: &str = "search.json";
pub const LOG_FILE: &str = "iterations.csv";
pub const PLAN_FILE: &str = "merge_plan.json";
pub const ADAPTERS_DIR: &str = "adapters";
pub const SUBSPACE_FILE: &str = "subspace.json";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn dataset_files(out: &Path) -> Vec<PathBuf> {
    let path = out.join(DATASET_FILE);
    let (bin, json) = rr_core::datagen::embedding_paths(&path);
    vec![path, bin, json]
}

#[derive(Serialize)]
struct SearchIteration<'a> {
    iteration: usize,
    instruction: &'a str,
    warm_seeds: usize,
    added: usize,
    below_floor: usize,
    best_arm: u64,
    rounds: &'a [ScoreRow],
    skipped: Vec<SkippedRound>,
}

#[derive(Serialize)]
struct SkippedRound {
    round: usize,
    error: &'static str,
}

fn write_search_log(path: &Path, out: &GenOutcome) -> Result<(), CliError> {
    let rows: Vec<SearchIteration<'_>> = out
        .iterations
        .iter()
        .map(|it| SearchIteration {
            iteration: it.iteration,
            instruction: &it.instruction,
            warm_seeds: it.warm_seeds.len(),
            added: it.added,
            below_floor: it.flagged,
            best_arm: it.inner.best_arm.id,
            rounds: &it.inner.table,
            skipped: it.inner.skipped.iter().map(|&(round, error)| SkippedRound { round, error }).collect(),
        })
        .collect();
    let mut text = serde_json::to_string_pretty(&rows).expect("search log serializes");
    text.push('\n');
    fs::write(path, text).map_err(CliError::io(path))
}

fn contexts(run: &RunConfig) -> Result<Vec<String>, CliError> {
    match &run.contexts {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(CliError::io(path))?;
            let lines: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
            if lines.is_empty() {
                return Err(CliError::Config(format!("contexts: {} has no non-empty lines", path.display())));
            }
            Ok(lines)
        }
        None => Ok(toy_generation_suite(run.seed).contexts),
    }
}

#[derive(Clone, Debug)]
pub struct GenSummary {
    pub records: usize,
    pub vendi: f64,
    pub mean_relevance: f64,
    pub dataset: PathBuf,
}

fn summarize(dataset: &ForgetDataset, path: PathBuf) -> Result<GenSummary, CliError> {
    let n = dataset.len().max(1) as f64;
    Ok(GenSummary {
        records: dataset.len(),
        vendi: dataset.vendi()?,
        mean_relevance: dataset.records().iter().map(|r| r.relevance).sum::<f64>() / n,
        dataset: path,
    })
}

fn generate(run: &RunConfig, stack: &GenStack, cfg: &GenConfig, out: &Path) -> Result<(GenOutcome, GenSummary), CliError> {
    create_dir(out)?;
    let ctx = GenerationContext::new(contexts(run)?, cfg.batch_size)?;
    let path = out.join(DATASET_FILE);
    match run_outer_loop(&ctx, stack.backends(), cfg, run.seed) {
        Ok(outcome) => {
            outcome.dataset.write(&path)?;
            write_search_log(&out.join(SEARCH_FILE), &outcome)?;
            let summary = summarize(&outcome.dataset, path)?;
            Ok((outcome, summary))
        }
        Err(DatagenError::Aborted { partial, completed, source }) => {
            partial.write(&path)?;
            log::error!("generation aborted after {completed} iterations; {} records kept in {}", partial.len(), path.display());
            Err(DatagenError::Aborted { partial, completed, source }.into())
        }
        Err(e) => Err(e.into()),
    }
}

/// `gen-data`: instruction search and dataset harvest.
pub fn gen_data(run: &RunConfig, out: &Path) -> Result<GenSummary, CliError> {
    let stack = gen_stack(run)?;
    let (_, summary) = generate(run, &stack, &run.datagen, out)?;
    let mut artifacts = dataset_files(out);
    artifacts.push(out.join(SEARCH_FILE));
    write_manifest(out, "gen-data", run.seed, run.snapshot(), &artifacts)?;
    Ok(summary)
}

fn relative_plan(state: &rr_core::adapters::WeightState, out: &Path) -> Result<MergePlan, CliError> {
    let mut plan = MergePlan::from_state(state)?;
    for t in &mut plan.terms {
        if let Ok(rel) = t.adapter_path.strip_prefix(out) {
            t.adapter_path = rel.to_path_buf();
        }
    }
    Ok(plan)
}

fn run_unlearning(
    run: &RunConfig,
    cfg: &UnlearnConfig,
    stack: &crate::wiring::TrainStack,
    out: &Path,
) -> Result<UnlearnOutcome, CliError> {
    create_dir(out)?;
    let datasets = Datasets { forget: &run.datasets.forget, retain: &run.datasets.retain };
    let result = run_iterations(
        stack.base.clone(),
        datasets,
        cfg,
        stack.trainer.as_ref(),
        stack.evaluator.as_ref(),
        Some(out),
    );
    let log_path = out.join(LOG_FILE);
    match result {
        Ok(outcome) => {
            emit_log(&outcome.log, &log_path)?;
            write_merge_plan(&relative_plan(&outcome.state, out)?, &out.join(PLAN_FILE))?;
            Ok(outcome)
        }
        Err(UnlearnError::Aborted { partial, state, source }) => {
            emit_log(&partial, &log_path)?;
            write_merge_plan(&relative_plan(&state, out)?, &out.join(PLAN_FILE))?;
            log::error!("unlearning aborted; partial log in {}", log_path.display());
            Err(UnlearnError::Aborted { partial, state, source }.into())
        }
        Err(e) => Err(e.into()),
    }
}

/// `unlearn`: the alternating subtract/add schedule.
pub fn unlearn(run: &RunConfig, out: &Path) -> Result<UnlearnOutcome, CliError> {
    let stack = train_stack(run)?;
    let outcome = run_unlearning(run, &run.unlearn, &stack, out)?;
    let artifacts = [out.join(LOG_FILE), out.join(PLAN_FILE), out.join(ADAPTERS_DIR)];
    write_manifest(out, "unlearn", run.seed, run.snapshot(), &artifacts)?;
    Ok(outcome)
}

#[derive(Clone, Debug, Serialize)]
pub struct SubspaceOutput {
    #[serde(flatten)]
    pub report: SimilarityReport,
    /// `1/√k`, the raw score of identical subspaces.
    pub self_similarity: f64,
    pub ortho_penalty: f64,
}

impl SubspaceOutput {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub fn compare_adapters(
    retain: &AdapterDelta,
    forget: &AdapterDelta,
    k: usize,
    normalized: bool,
) -> Result<SubspaceOutput, CliError> {
    let report = report(retain, forget, k, normalized)?;
    let self_similarity = if normalized { 1.0 } else { 1.0 / (k as f64).sqrt() };
    Ok(SubspaceOutput { report, self_similarity, ortho_penalty: ortho_penalty(retain, forget)? })
}

/// `subspace`: eigenbasis similarity of two adapter directories.
pub fn subspace(retain: &Path, forget: &Path, k: usize, normalized: bool, out: Option<&Path>) -> Result<SubspaceOutput, CliError> {
    let result = compare_adapters(&read_adapter(retain)?, &read_adapter(forget)?, k, normalized)?;
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        fs::write(path, result.to_json()).map_err(CliError::io(path))?;
    }
    Ok(result)
}

/// `vendi`: diversity of the non-blank lines of a text file.
pub fn vendi(run: &RunConfig, file: &Path) -> Result<f64, CliError> {
    let text = fs::read_to_string(file).map_err(CliError::io(file))?;
    let lines: Vec<String> = text.lines().filter(|l| !l.trim().is_empty()).map(String::from).collect();
    if lines.is_empty() {
        return Err(CliError::Config(format!("{} has no non-empty lines", file.display())));
    }
    let set = crate::wiring::embedder(run)?.embed(&lines)?;
    Ok(vendi_of_set(&EmbeddingSet::normalized(set.into_vectors())?)?)
}

/// Rounds to six decimals for display, so an all-identical file prints `1.0`.
pub fn display_score(v: f64) -> String {
    format!("{:?}", (v * 1e6).round() / 1e6)
}

/// `merge`: folds a merge plan into one adapter whose update equals the
/// plan's total update. Per layer the factors are stacked:
/// `A = [A₁; A₂; …]`, `B = [c₁s₁B₁, c₂s₂B₂, …]`, scale 1.
pub fn merge(plan_path: &Path, out: &Path, name: &str) -> Result<AdapterDelta, CliError> {
    let plan = read_merge_plan(plan_path)?;
    let root = plan_path.parent().unwrap_or(Path::new(""));
    let terms = plan.load_terms(root)?;
    let mut layers: BTreeMap<String, Vec<(f64, &LowRankPair)>> = BTreeMap::new();
    for t in &terms {
        let c = t.coefficient();
        if c == 0.0 {
            continue;
        }
        for (layer, pair) in &t.delta.layers {
            layers.entry(layer.clone()).or_default().push((c, pair));
        }
    }
    let mut merged = AdapterDelta::new(name);
    for (layer, parts) in layers {
        let (d_out, d_in) = (parts[0].1.d_out(), parts[0].1.d_in());
        if parts.iter().any(|(_, p)| (p.d_out(), p.d_in()) != (d_out, d_in)) {
            return Err(rr_core::adapters::AdapterError::ShapeMismatch {
                layer,
                detail: "terms disagree on the layer shape".into(),
            }
            .into());
        }
        let rank: usize = parts.iter().map(|(_, p)| p.rank()).sum();
        let mut a = DenseMatrix::zeros(rank, d_in);
        let mut b = DenseMatrix::zeros(d_out, rank);
        let mut offset = 0;
        for (c, p) in &parts {
            let factor = c * p.scale();
            for r in 0..p.rank() {
                for j in 0..d_in {
                    a[(offset + r, j)] = p.a()[(r, j)];
                }
                for i in 0..d_out {
                    b[(i, offset + r)] = factor * p.b()[(i, r)];
                }
            }
            offset += p.rank();
        }
        merged = merged.with_layer(layer, LowRankPair::new(a, b, 1.0)?);
    }
    write_adapter(&merged, out)?;
    Ok(merged)
}

/// Everything the toy demo computes, plus its printed table.
#[derive(Clone, Debug)]
pub struct DemoReport {
    pub seed: u64,
    pub generation: GenSummary,
    pub log: IterationLog,
    pub state: rr_core::adapters::WeightState,
    pub stop: StopReason,
    pub subspace: SubspaceOutput,
    pub text: String,
}

impl DemoReport {
    pub fn base(&self) -> TradeoffPoint {
        self.log.base
    }

    pub fn last(&self) -> TradeoffPoint {
        self.log.last_point()
    }
}

/// Rank of the adapters trained for the demo's subspace comparison.
pub const DEMO_SUBSPACE_RANK: usize = 8;

/// Retain and forget adapters trained directly on the toy base model.
pub fn toy_task_adapters(seed: u64, rank: usize) -> Result<(AdapterDelta, AdapterDelta), CliError> {
    let env = make_env(seed);
    let hyper = TrainHyper { rank, ..TrainHyper::default() };
    let base = env.base_state();
    let retain = env.train(&base, TaskKind::Retain, Objective::RetainFit, &hyper)?;
    let forget = env.train(&base, TaskKind::Forget, Objective::ForgetFit, &hyper)?;
    Ok((retain, forget))
}

/// `toy-demo`: generation, unlearning and a subspace check, all on the
/// in-process toy backends. With `out`, every artifact is kept there.
pub fn toy_demo(seed: u64, out: Option<&Path>) -> Result<DemoReport, CliError> {
    let scratch;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => {
            scratch = tempfile::tempdir().map_err(CliError::io(std::env::temp_dir()))?;
            scratch.path().to_path_buf()
        }
    };
    let run = RunConfig { seed, ..RunConfig::default() };
    let stack = gen_stack(&run)?;
    let (outcome, generation) = generate(&run, &stack, &run.datagen, &dir)?;

    let env = Arc::new(make_env(seed));
    let backend = ToyBackend::new(env.clone());
    let train = crate::wiring::TrainStack {
        trainer: Box::new(backend.clone()),
        evaluator: Box::new(backend),
        base: env.base_state(),
    };
    let unlearned = run_unlearning(&run, &run.unlearn, &train, &dir)?;

    let (retain, forget) = toy_task_adapters(seed, DEMO_SUBSPACE_RANK)?;
    let subspace = compare_adapters(&retain, &forget, DEFAULT_TOP_K, false)?;
    fs::write(dir.join(SUBSPACE_FILE), subspace.to_json()).map_err(CliError::io(dir.join(SUBSPACE_FILE)))?;

    let mut text = String::new();
    let _ = writeln!(text, "toy demo, seed {seed}");
    let _ = writeln!(
        text,
        "forget data: {} records from {} outer iterations, vendi {}, mean relevance {}",
        generation.records,
        outcome.iterations.len(),
        sig6(generation.vendi),
        sig6(generation.mean_relevance)
    );
    for it in &outcome.iterations {
        let _ = writeln!(text, "  iteration {}: {:?} (+{} records)", it.iteration, it.instruction, it.added);
    }
    let base = unlearned.log.base;
    let last = unlearned.log.last_point();
    let _ = writeln!(text, "base: s = {}, u = {}", sig6(base.s), sig6(base.u));
    text.push_str(&unlearned.log.to_csv());
    let stop = match &unlearned.stop {
        StopReason::Completed => "all iterations completed".to_string(),
        StopReason::TargetsReached { step } => format!("targets reached at step {step}"),
        StopReason::FallbackUsed => "completed with a fallback forget weight".to_string(),
    };
    let _ = writeln!(text, "stop: {stop}");
    let _ = writeln!(
        text,
        "final: s = {} ({} of base), u = {} ({} of base)",
        sig6(last.s),
        sig6(last.s / base.s),
        sig6(last.u),
        sig6(last.u / base.u)
    );
    let _ = writeln!(
        text,
        "subspace (rank-{DEMO_SUBSPACE_RANK} adapters, k = {}): mean raw similarity {}, identical subspaces {}",
        DEFAULT_TOP_K,
        sig6(subspace.report.mean),
        sig6(subspace.self_similarity)
    );

    if out.is_some() {
        let mut artifacts = dataset_files(&dir);
        artifacts.extend([
            dir.join(SEARCH_FILE),
            dir.join(LOG_FILE),
            dir.join(PLAN_FILE),
            dir.join(ADAPTERS_DIR),
            dir.join(SUBSPACE_FILE),
        ]);
        write_manifest(&dir, "toy-demo", seed, run.snapshot(), &artifacts)?;
    }
    Ok(DemoReport { seed, generation, log: unlearned.log, state: unlearned.state, stop: unlearned.stop, subspace, text })
}

/// The composed plan of a finished run, re-read from disk.
pub fn load_plan_state(
    plan_path: &Path,
    signature: &rr_core::adapters::ModelSignature,
) -> Result<rr_core::adapters::WeightState, CliError> {
    let plan = read_merge_plan(plan_path)?;
    let terms = plan.load_terms(plan_path.parent().unwrap_or(Path::new("")))?;
    Ok(compose(plan.base_ref, signature, terms)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rr_core::adapters::{ModelSignature, PlanTerm};

    fn pair(seed: f64, rank: usize, scale: f64) -> LowRankPair {
        let a = DenseMatrix::from_fn(rank, 5, |i, j| ((i * 5 + j) as f64 * seed).sin());
        let b = DenseMatrix::from_fn(3, rank, |i, j| ((i * rank + j) as f64 * seed).cos());
        LowRankPair::new(a, b, scale).unwrap()
    }

    #[test]
    fn merged_adapter_carries_the_plans_total_update() {
        let dir = tempfile::tempdir().unwrap();
        let deltas = [
            AdapterDelta::new("f").with_layer("l", pair(0.7, 2, 12.0)),
            AdapterDelta::new("r").with_layer("l", pair(1.3, 3, 0.5)),
        ];
        for d in &deltas {
            write_adapter(d, &dir.path().join(&d.name)).unwrap();
        }
        let plan = MergePlan {
            base_ref: "b".into(),
            terms: vec![
                PlanTerm { sign: -1, weight: 2.0, adapter_path: "f".into() },
                PlanTerm { sign: 1, weight: 0.3, adapter_path: "r".into() },
                PlanTerm { sign: 1, weight: 0.0, adapter_path: "r".into() },
            ],
        };
        let plan_path = dir.path().join(PLAN_FILE);
        write_merge_plan(&plan, &plan_path).unwrap();
        let merged = merge(&plan_path, &dir.path().join("m"), "m").unwrap();
        assert_eq!(merged.layers["l"].rank(), 5);
        assert_eq!(read_adapter(&dir.path().join("m")).unwrap().layers.len(), 1);

        let sig = ModelSignature::new(BTreeMap::from([("l".to_string(), (3, 5))])).unwrap();
        let state = load_plan_state(&plan_path, &sig).unwrap();
        let base = DenseMatrix::zeros(3, 5);
        let expected = state.materialize("l", &base).unwrap();
        assert!(merged.layers["l"].delta().max_abs_diff(&expected) < 1e-12);
    }
}
