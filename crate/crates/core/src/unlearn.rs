//! Iterative unlearning: subtract a forget adapter, then alternate adding
//! retain adapters and subtracting fresh forget adapters, picking each
//! weight from a grid by simple threshold rules on the (s, u) trade-off.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{read_adapter, write_adapter, AdapterDelta, AdapterError, Sign, Term, WeightState};
use crate::backends::{BackendError, Evaluator, Objective, TrainHyper, Trainer};

pub const DEFAULT_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 1.0, 2.0, 3.0, 5.0];
pub const CSV_HEADER: &str = "step,action,weight,s,u";

/// Forget score `s` (lower is more forgotten) and utility `u` (higher is
/// better), in task-native units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub s: f64,
    pub u: f64,
}

impl TradeoffPoint {
    pub fn new(s: f64, u: f64) -> Self {
        Self { s, u }
    }
}

#[derive(Debug, Error)]
pub enum UnlearnError {
    #[error("no grid weight satisfies the forget rule; best net gain at weight {suggested} -> s = {}, u = {}", point.s, point.u)]
    NoFeasibleWeight { suggested: f64, point: TradeoffPoint, probes: Vec<Probe> },
    #[error("invalid selection rule: {0}")]
    InvalidRule(String),
    #[error("evaluator returned a non-finite point for weight {0}")]
    NonFinitePoint(f64),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("malformed iteration log: {0}")]
    MalformedLog(String),
    #[error("unlearning stopped after {} logged steps: {source}", partial.entries.len())]
    Aborted {
        partial: Box<IterationLog>,
        state: Box<WeightState>,
        #[source]
        source: Box<UnlearnError>,
    },
}

impl UnlearnError {
    pub fn kind(&self) -> &'static str {
        match self {
            UnlearnError::NoFeasibleWeight { .. } => "NoFeasibleWeight",
            UnlearnError::InvalidRule(_) => "InvalidRule",
            UnlearnError::NonFinitePoint(_) => "NonFinitePoint",
            UnlearnError::Backend(e) => e.kind(),
            UnlearnError::Adapter(e) => e.kind(),
            UnlearnError::MalformedLog(_) => "MalformedLog",
            UnlearnError::Aborted { source, .. } => source.kind(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionRule {
    #[serde(default = "default_forget_ratio")]
    pub forget_ratio: f64,
    #[serde(default = "default_utility_floor")]
    pub utility_floor: f64,
    #[serde(default = "default_grid")]
    pub grid: Vec<f64>,
}

fn default_forget_ratio() -> f64 {
    0.1
}
fn default_utility_floor() -> f64 {
    0.95
}
fn default_grid() -> Vec<f64> {
    DEFAULT_GRID.to_vec()
}

impl Default for SelectionRule {
    fn default() -> Self {
        Self { forget_ratio: default_forget_ratio(), utility_floor: default_utility_floor(), grid: default_grid() }
    }
}

impl SelectionRule {
    pub fn validate(&self) -> Result<(), UnlearnError> {
        if !(self.forget_ratio > 0.0 && self.forget_ratio < 1.0) {
            return Err(UnlearnError::InvalidRule(format!("forget_ratio {} outside (0, 1)", self.forget_ratio)));
        }
        if !(self.utility_floor > 0.0 && self.utility_floor <= 1.0) {
            return Err(UnlearnError::InvalidRule(format!("utility_floor {} outside (0, 1]", self.utility_floor)));
        }
        if self.grid.is_empty() {
            return Err(UnlearnError::InvalidRule("candidate grid is empty".into()));
        }
        if self.grid.iter().any(|w| !(w.is_finite() && *w > 0.0)) || self.grid.windows(2).any(|p| p[0] >= p[1]) {
            return Err(UnlearnError::InvalidRule("candidate grid must be positive and strictly ascending".into()));
        }
        Ok(())
    }

    /// First clause: forget score dropped to `forget_ratio` of the reference.
    pub fn forget_reached(&self, reference: TradeoffPoint, p: TradeoffPoint) -> bool {
        p.s <= self.forget_ratio * reference.s
    }

    /// Second clause: forgetting gained more than utility lost.
    pub fn net_gain(reference: TradeoffPoint, p: TradeoffPoint) -> bool {
        reference.s - p.s > reference.u - p.u
    }

    pub fn utility_kept(&self, reference: TradeoffPoint, p: TradeoffPoint) -> bool {
        p.u >= self.utility_floor * reference.u
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub weight: f64,
    pub point: TradeoffPoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub weight: f64,
    pub point: TradeoffPoint,
    pub probes: Vec<Probe>,
    /// For λ: no candidate met the utility floor and the argmax-u weight was used.
    pub floor_missed: bool,
}

fn probe(
    state: &WeightState,
    template: &Term,
    sign: Sign,
    weight: f64,
    evaluator: &dyn Evaluator,
) -> Result<Probe, UnlearnError> {
    let mut term = template.clone();
    term.sign = sign;
    term.weight = weight;
    let point = evaluator.evaluate(&state.with_term(term)?)?;
    if !point.s.is_finite() || !point.u.is_finite() {
        return Err(UnlearnError::NonFinitePoint(weight));
    }
    Ok(Probe { weight, point })
}

/// Smallest grid μ whose subtraction brings `s` to `forget_ratio · prev.s`;
/// failing that, the smallest μ whose forget gain exceeds its utility loss.
/// `forget` supplies the adapter (and its source); its sign and weight are
/// replaced per candidate.
pub fn select_mu(
    state: &WeightState,
    forget: &Term,
    prev: TradeoffPoint,
    rule: &SelectionRule,
    evaluator: &dyn Evaluator,
) -> Result<Selection, UnlearnError> {
    rule.validate()?;
    let mut probes = Vec::with_capacity(rule.grid.len());
    for &mu in &rule.grid {
        let p = probe(state, forget, Sign::Minus, mu, evaluator)?;
        probes.push(p);
        if rule.forget_reached(prev, p.point) {
            return Ok(Selection { weight: mu, point: p.point, probes, floor_missed: false });
        }
    }
    if let Some(p) = probes.iter().find(|p| SelectionRule::net_gain(prev, p.point)) {
        return Ok(Selection { weight: p.weight, point: p.point, probes: probes.clone(), floor_missed: false });
    }
    let gain = |p: &Probe| (prev.s - p.point.s) - (prev.u - p.point.u);
    let best = probes
        .iter()
        .copied()
        .reduce(|best, p| if gain(&p) > gain(&best) { p } else { best })
        .expect("grid is non-empty");
    Err(UnlearnError::NoFeasibleWeight { suggested: best.weight, point: best.point, probes })
}

/// Smallest grid λ whose addition keeps `u ≥ utility_floor · prev.u`; if none
/// does, the λ with the highest `u` (first on ties), flagged as a floor miss.
pub fn select_lambda(
    state: &WeightState,
    retain: &Term,
    prev: TradeoffPoint,
    rule: &SelectionRule,
    evaluator: &dyn Evaluator,
) -> Result<Selection, UnlearnError> {
    rule.validate()?;
    let mut probes = Vec::with_capacity(rule.grid.len());
    for &lambda in &rule.grid {
        let p = probe(state, retain, Sign::Plus, lambda, evaluator)?;
        probes.push(p);
        if rule.utility_kept(prev, p.point) {
            return Ok(Selection { weight: lambda, point: p.point, probes, floor_missed: false });
        }
    }
    let best = probes
        .iter()
        .copied()
        .reduce(|best, p| if p.point.u > best.point.u { p } else { best })
        .expect("grid is non-empty");
    log::warn!("no retain weight reached the utility floor; using {} (u = {})", best.weight, best.point.u);
    Ok(Selection { weight: best.weight, point: best.point, probes, floor_missed: true })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    SubtractForget,
    AddRetain,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::SubtractForget => "subtract_forget",
            Action::AddRetain => "add_retain",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "subtract_forget" => Some(Action::SubtractForget),
            "add_retain" => Some(Action::AddRetain),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub action: Action,
    pub weight: f64,
    pub point: TradeoffPoint,
    /// The point the selection rule compared against.
    pub reference: TradeoffPoint,
    pub floor_missed: bool,
    /// μ taken from the infeasibility suggestion under an override.
    pub fallback: bool,
    pub probes: Vec<Probe>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub base: TradeoffPoint,
    pub entries: Vec<LogEntry>,
}

impl IterationLog {
    pub fn new(base: TradeoffPoint) -> Self {
        Self { base, entries: Vec::new() }
    }

    pub fn last_point(&self) -> TradeoffPoint {
        self.entries.last().map_or(self.base, |e| e.point)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.step,
                e.action.as_str(),
                sig6(e.weight),
                sig6(e.point.s),
                sig6(e.point.u)
            );
        }
        out
    }

    /// Structural checks: steps strictly increase, the first action is a
    /// subtraction and actions alternate afterwards.
    pub fn check_structure(&self) -> Result<(), String> {
        for (i, e) in self.entries.iter().enumerate() {
            let expected = if i % 2 == 0 { Action::SubtractForget } else { Action::AddRetain };
            if e.action != expected {
                return Err(format!("step {} is {} but {} was expected", e.step, e.action.as_str(), expected.as_str()));
            }
            if i > 0 && e.step <= self.entries[i - 1].step {
                return Err(format!("step {} does not increase", e.step));
            }
        }
        Ok(())
    }
}

/// Rounds to six significant digits and prints the shortest exact form.
pub fn sig6(x: f64) -> String {
    let rounded: f64 = format!("{x:.5e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

/// One parsed CSV row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub action: Action,
    pub weight: f64,
    pub point: TradeoffPoint,
}

pub fn parse_log_csv(text: &str) -> Result<Vec<LogRow>, UnlearnError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(UnlearnError::MalformedLog(format!("bad header {other:?}"))),
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || UnlearnError::MalformedLog(format!("bad row {line:?}"));
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(LogRow {
                step: f[0].parse().map_err(|_| bad())?,
                action: Action::parse(f[1]).ok_or_else(bad)?,
                weight: num(f[2])?,
                point: TradeoffPoint::new(num(f[3])?, num(f[4])?),
            })
        })
        .collect()
}

pub fn emit_log(log: &IterationLog, path: &Path) -> Result<(), UnlearnError> {
    std::fs::write(path, log.to_csv())
        .map_err(|e| UnlearnError::Adapter(AdapterError::Io { path: path.to_path_buf(), source: e }))
}

/// Re-checks every logged weight against the selection rule using the
/// logged reference points.
pub fn verify_compliance(log: &IterationLog, rule: &SelectionRule) -> Result<(), String> {
    log.check_structure()?;
    for e in &log.entries {
        let ok = match e.action {
            Action::SubtractForget => {
                e.fallback || rule.forget_reached(e.reference, e.point) || SelectionRule::net_gain(e.reference, e.point)
            }
            Action::AddRetain => e.floor_missed || rule.utility_kept(e.reference, e.point),
        };
        if !ok {
            return Err(format!(
                "step {} ({} at {}) violates the rule: reference {:?}, point {:?}",
                e.step,
                e.action.as_str(),
                e.weight,
                e.reference,
                e.point
            ));
        }
    }
    Ok(())
}

/// Rebuilds each intermediate state from `state`'s terms, re-evaluates it,
/// and checks that the logged points and references are reproduced exactly
/// before checking rule compliance.
pub fn reverify_with(
    state: &WeightState,
    log: &IterationLog,
    rule: &SelectionRule,
    evaluator: &dyn Evaluator,
) -> Result<(), String> {
    if state.terms().len() != log.entries.len() {
        return Err(format!("{} terms but {} log entries", state.terms().len(), log.entries.len()));
    }
    let prefix = |n: usize| -> Result<TradeoffPoint, String> {
        let mut s = WeightState::base(state.base_ref.clone(), state.signature().clone());
        for t in &state.terms()[..n] {
            s = s.with_term(t.clone()).map_err(|e| e.to_string())?;
        }
        evaluator.evaluate(&s).map_err(|e| e.to_string())
    };
    let points: Vec<TradeoffPoint> = (0..=log.entries.len()).map(prefix).collect::<Result<_, _>>()?;
    if points[0] != log.base {
        return Err(format!("base point {:?} re-evaluates to {:?}", log.base, points[0]));
    }
    for (i, e) in log.entries.iter().enumerate() {
        let term = &state.terms()[i];
        let expected_sign = if e.action == Action::SubtractForget { Sign::Minus } else { Sign::Plus };
        if term.sign != expected_sign || term.weight != e.weight {
            return Err(format!("term {i} does not match step {}", e.step));
        }
        let reference = match e.action {
            Action::SubtractForget => points[i],
            Action::AddRetain => points[i - 1],
        };
        if points[i + 1] != e.point || reference != e.reference {
            return Err(format!("step {} does not re-evaluate to its logged points", e.step));
        }
    }
    verify_compliance(log, rule)
}

/// Early-stop thresholds, either absolute or as fractions of the base point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Targets {
    pub s: f64,
    pub u: f64,
    #[serde(default)]
    pub relative: bool,
}

impl Default for Targets {
    fn default() -> Self {
        Self { s: 0.1, u: 0.8, relative: true }
    }
}

impl Targets {
    pub fn reached(&self, base: TradeoffPoint, p: TradeoffPoint) -> bool {
        if self.relative {
            p.s <= self.s * base.s && p.u >= self.u * base.u
        } else {
            p.s <= self.s && p.u >= self.u
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnConfig {
    #[serde(flatten)]
    pub rule: SelectionRule,
    /// Number of retain/forget iterations after the initial subtraction.
    #[serde(rename = "T", default = "default_iterations")]
    pub iterations: usize,
    /// Omitted means the default targets; `null` disables early stopping.
    #[serde(default = "default_targets")]
    pub targets: Option<Targets>,
    /// Continue with the suggested μ when no grid weight is feasible.
    #[serde(default)]
    pub allow_fallback: bool,
    #[serde(default)]
    pub hyper: TrainHyper,
}

fn default_iterations() -> usize {
    3
}

fn default_targets() -> Option<Targets> {
    Some(Targets::default())
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            rule: SelectionRule::default(),
            iterations: default_iterations(),
            targets: default_targets(),
            allow_fallback: false,
            hyper: TrainHyper::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    Completed,
    TargetsReached { step: usize },
    FallbackUsed,
}

#[derive(Clone, Debug)]
pub struct UnlearnOutcome {
    pub state: WeightState,
    pub log: IterationLog,
    pub stop: StopReason,
}

/// Dataset references handed to the trainer.
#[derive(Clone, Debug)]
pub struct Datasets<'a> {
    pub forget: &'a str,
    pub retain: &'a str,
}

struct Runner<'a> {
    trainer: &'a dyn Trainer,
    evaluator: &'a dyn Evaluator,
    cfg: &'a UnlearnConfig,
    datasets: Datasets<'a>,
    store: Option<&'a Path>,
}

impl Runner<'_> {
    fn train(&self, state: &WeightState, objective: Objective, name: String) -> Result<Term, UnlearnError> {
        let dataset = match objective {
            Objective::ForgetFit => self.datasets.forget,
            Objective::RetainFit => self.datasets.retain,
        };
        let mut delta: AdapterDelta = self.trainer.train_adapter(state, dataset, objective, &self.cfg.hyper)?;
        delta.name = name;
        crate::adapters::validate(&delta, state.signature())?;
        match self.store {
            Some(root) => {
                let dir: PathBuf = root.join("adapters").join(&delta.name);
                write_adapter(&delta, &dir)?;
                // Keep exactly what a replay from disk would see.
                let stored = read_adapter(&dir)?;
                Ok(Term::new(Sign::Minus, 0.0, Arc::new(stored)).with_source(dir))
            }
            None => Ok(Term::new(Sign::Minus, 0.0, Arc::new(delta))),
        }
    }

    fn subtract(
        &self,
        state: &WeightState,
        log: &mut IterationLog,
        iteration: usize,
    ) -> Result<(WeightState, bool), UnlearnError> {
        let term = self.train(state, Objective::ForgetFit, format!("forget-{iteration}"))?;
        let prev = log.last_point();
        let (selection, fallback) = match select_mu(state, &term, prev, &self.cfg.rule, self.evaluator) {
            Ok(s) => (s, false),
            Err(UnlearnError::NoFeasibleWeight { suggested, point, probes }) if self.cfg.allow_fallback => {
                log::warn!("no feasible forget weight; continuing with suggested {suggested}");
                (Selection { weight: suggested, point, probes, floor_missed: false }, true)
            }
            Err(e) => return Err(e),
        };
        let next = state.with_term(Term { sign: Sign::Minus, weight: selection.weight, ..term })?;
        push(log, Action::SubtractForget, selection, prev, fallback);
        Ok((next, fallback))
    }

    fn add(&self, state: &WeightState, log: &mut IterationLog, iteration: usize) -> Result<WeightState, UnlearnError> {
        let term = self.train(state, Objective::RetainFit, format!("retain-{iteration}"))?;
        // Utility as it stood before the most recent forget subtraction.
        let n = log.entries.len();
        let reference = if n >= 2 { log.entries[n - 2].point } else { log.base };
        let selection = select_lambda(state, &term, reference, &self.cfg.rule, self.evaluator)?;
        let next = state.with_term(Term { sign: Sign::Plus, weight: selection.weight, ..term })?;
        push(log, Action::AddRetain, selection, reference, false);
        Ok(next)
    }
}

fn push(log: &mut IterationLog, action: Action, selection: Selection, reference: TradeoffPoint, fallback: bool) {
    log.entries.push(LogEntry {
        step: log.entries.len() + 1,
        action,
        weight: selection.weight,
        point: selection.point,
        reference,
        floor_missed: selection.floor_missed,
        fallback,
        probes: selection.probes,
    });
}

/// Runs the schedule: one forget subtraction, then up to `cfg.iterations`
/// rounds of retain addition followed by forget subtraction, stopping early
/// once a logged point meets `cfg.targets`. When `store`
/// is given, every trained adapter is persisted under `store/adapters/` and
/// referenced by its directory.
///
/// Failures return [`UnlearnError::Aborted`] carrying the partial log and
/// the state reached so far.
pub fn run_iterations(
    base: WeightState,
    datasets: Datasets<'_>,
    cfg: &UnlearnConfig,
    trainer: &dyn Trainer,
    evaluator: &dyn Evaluator,
    store: Option<&Path>,
) -> Result<UnlearnOutcome, UnlearnError> {
    cfg.rule.validate()?;
    let base_point = evaluator.evaluate(&base)?;
    let runner = Runner { trainer, evaluator, cfg, datasets, store };
    let mut log = IterationLog::new(base_point);
    let mut state = base;
    let mut used_fallback = false;

    let schedule = std::iter::once((Action::SubtractForget, 0))
        .chain((1..=cfg.iterations).flat_map(|i| [(Action::AddRetain, i), (Action::SubtractForget, i)]));
    for (action, iteration) in schedule {
        let step = match action {
            Action::SubtractForget => runner.subtract(&state, &mut log, iteration).map(|(next, fb)| {
                used_fallback |= fb;
                next
            }),
            Action::AddRetain => runner.add(&state, &mut log, iteration),
        };
        state = match step {
            Ok(next) => next,
            Err(e) => {
                return Err(UnlearnError::Aborted {
                    partial: Box::new(log),
                    state: Box::new(state),
                    source: Box::new(e),
                })
            }
        };
        state.iteration = iteration;
        let p = log.last_point();
        log::info!("step {} ({}): s = {}, u = {}", log.entries.len(), action.as_str(), p.s, p.u);
        if cfg.targets.as_ref().is_some_and(|t| t.reached(log.base, p)) {
            let step = log.entries.len();
            return Ok(UnlearnOutcome { state, log, stop: StopReason::TargetsReached { step } });
        }
    }
    let stop = if used_fallback { StopReason::FallbackUsed } else { StopReason::Completed };
    Ok(UnlearnOutcome { state, log, stop })
}
