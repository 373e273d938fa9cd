//! Multiplicative iterations `x ← x ⊙ U(x)/V(x)` and the driver that runs
//! them under one or more stopping rules.
//!
//! ISRA: `U = Hᵀy`, `V = HᵀHx` (Gaussian noise).
//! EM:   `U = Hᵀ(y/Hx)`, `V = Hᵀ1` (Poisson noise).

use std::cell::OnceCell;
use std::fmt;
use std::str::FromStr;

use ndarray::Array1;

use crate::error::{check_len, Error, Result};
use crate::objectives::{self, NoiseModel, TINY};
use crate::operators::{DataVector, ForwardOperator, ImageVector};
use crate::stopping::{RuleTrace, StoppingRule};

pub const DEFAULT_MAX_ITER: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverKind {
    Isra,
    Em,
}

impl SolverKind {
    /// The solver whose fixed point is the ML estimate under `noise`.
    pub fn for_noise(noise: NoiseModel) -> Self {
        match noise {
            NoiseModel::Gaussian { .. } => SolverKind::Isra,
            NoiseModel::Poisson => SolverKind::Em,
        }
    }

    pub fn check_noise(self, noise: NoiseModel) -> Result<()> {
        if Self::for_noise(noise) != self {
            return Err(Error::IncompatibleSolver {
                solver: self.to_string(),
                noise: noise.to_string(),
            });
        }
        Ok(())
    }

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Isra => "isra",
            SolverKind::Em => "em",
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "isra" => Ok(SolverKind::Isra),
            "em" | "mlem" | "richardson-lucy" => Ok(SolverKind::Em),
            other => Err(Error::invalid("solver", format!("unknown solver `{other}`"))),
        }
    }
}

/// Operator, data and noise model of one reconstruction, with `Hᵀy` cached.
#[derive(Debug)]
pub struct Problem<'a> {
    op: &'a ForwardOperator,
    data: &'a DataVector,
    noise: NoiseModel,
    backprojected_data: OnceCell<Vec<f64>>,
}

impl<'a> Problem<'a> {
    pub fn new(op: &'a ForwardOperator, data: &'a DataVector, noise: NoiseModel) -> Result<Self> {
        check_len("data", op.n_data(), data.len())?;
        if noise.is_poisson() {
            data.ensure_nonnegative()?;
        }
        Ok(Problem {
            op,
            data,
            noise,
            backprojected_data: OnceCell::new(),
        })
    }

    pub fn op(&self) -> &'a ForwardOperator {
        self.op
    }

    pub fn data(&self) -> &'a DataVector {
        self.data
    }

    pub fn noise(&self) -> NoiseModel {
        self.noise
    }

    /// `Hᵀy`.
    pub fn backprojected_data(&self) -> &[f64] {
        self.backprojected_data.get_or_init(|| {
            let mut out = vec![0.0; self.op.n_params()];
            self.op.adjoint_into(self.data.as_slice(), &mut out);
            out
        })
    }

    /// `D_LS` for Gaussian noise, `D_KL` for Poisson noise.
    pub fn objective(&self, state: &IterationState) -> Result<f64> {
        let (y, hx) = (self.data.as_slice(), state.forward().as_slice());
        match self.noise {
            NoiseModel::Gaussian { .. } => Ok(objectives::least_squares(y, hx)),
            NoiseModel::Poisson => objectives::kl_divergence(y, hx),
        }
    }
}

/// Current iterate `x⁽ᵏ⁾` with its forward projection and lazily computed
/// backprojections. The backprojection caches belong to the problem the state
/// was produced for.
#[derive(Debug, Clone)]
pub struct IterationState {
    iterate: ImageVector,
    k: usize,
    forward: DataVector,
    gram: OnceCell<Vec<f64>>,
    ratio: OnceCell<Vec<f64>>,
}

impl IterationState {
    pub fn new(op: &ForwardOperator, x0: ImageVector) -> Result<Self> {
        let forward = op.apply(&x0)?;
        Ok(Self::at(x0, 0, forward))
    }

    fn at(iterate: ImageVector, k: usize, forward: DataVector) -> Self {
        IterationState {
            iterate,
            k,
            forward,
            gram: OnceCell::new(),
            ratio: OnceCell::new(),
        }
    }

    pub fn iterate(&self) -> &ImageVector {
        &self.iterate
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Cached `Hx⁽ᵏ⁾`.
    pub fn forward(&self) -> &DataVector {
        &self.forward
    }

    pub fn into_iterate(self) -> ImageVector {
        self.iterate
    }

    /// `Hᵀ(Hx)`.
    pub fn gram(&self, op: &ForwardOperator) -> &[f64] {
        self.gram.get_or_init(|| {
            let mut out = vec![0.0; op.n_params()];
            op.adjoint_into(self.forward.as_slice(), &mut out);
            out
        })
    }

    /// `Hᵀ(y/Hx)`.
    pub fn backprojected_ratio(&self, problem: &Problem<'_>) -> Result<&[f64]> {
        if let Some(v) = self.ratio.get() {
            return Ok(v);
        }
        let ratio = objectives::data_ratio(problem.data().as_slice(), self.forward.as_slice())?;
        let mut out = vec![0.0; problem.op().n_params()];
        problem.op().adjoint_into(&ratio, &mut out);
        Ok(self.ratio.get_or_init(|| out))
    }
}

/// `x ⊙ max(U, 0) / V`.
///
/// Negative numerator components are clamped to zero, which pins the matching
/// pixels at zero for good.
pub fn multiplicative_step(x: &ImageVector, numerator: &[f64], denominator: &[f64]) -> Result<ImageVector> {
    check_len("numerator", x.len(), numerator.len())?;
    check_len("denominator", x.len(), denominator.len())?;
    let mut next = Vec::with_capacity(x.len());
    for (index, ((&xj, &u), &v)) in x.as_slice().iter().zip(numerator).zip(denominator).enumerate() {
        if !(v >= TINY) || !v.is_finite() {
            return Err(Error::DegenerateDenominator { index, value: v });
        }
        if !u.is_finite() {
            return Err(Error::NonFinite {
                what: "numerator",
                index,
            });
        }
        next.push(xj * (u.max(0.0) / v));
    }
    Ok(ImageVector::from_trusted(Array1::from(next), x.shape()))
}

fn advance(problem: &Problem<'_>, state: &IterationState, next: ImageVector) -> IterationState {
    let op = problem.op();
    let mut forward = vec![0.0; op.n_data()];
    op.forward_into(next.as_slice(), &mut forward);
    IterationState::at(next, state.k + 1, DataVector::from_trusted(Array1::from(forward)))
}

pub fn isra_step(state: &IterationState, problem: &Problem<'_>) -> Result<IterationState> {
    let next = multiplicative_step(
        state.iterate(),
        problem.backprojected_data(),
        state.gram(problem.op()),
    )?;
    Ok(advance(problem, state, next))
}

pub fn em_step(state: &IterationState, problem: &Problem<'_>) -> Result<IterationState> {
    let numerator = state.backprojected_ratio(problem)?;
    let next = multiplicative_step(
        state.iterate(),
        numerator,
        problem.op().column_sums().as_slice().expect("contiguous"),
    )?;
    Ok(advance(problem, state, next))
}

pub fn step(solver: SolverKind, state: &IterationState, problem: &Problem<'_>) -> Result<IterationState> {
    match solver {
        SolverKind::Isra => isra_step(state, problem),
        SolverKind::Em => em_step(state, problem),
    }
}

/// Flat start with `Σ(Hx⁰) = Σ max(y, 0)`.
pub fn default_start(op: &ForwardOperator, data: &DataVector) -> Result<ImageVector> {
    check_len("data", op.n_data(), data.len())?;
    let flux: f64 = data.as_slice().iter().map(|v| v.max(0.0)).sum();
    if flux <= 0.0 {
        return Err(Error::invalid("data", "no positive component to match the starting flux"));
    }
    let level = flux / op.column_sums().sum();
    ImageVector::constant(op.n_params(), level)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    RuleFired,
    MaxIterations,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::RuleFired => "RuleFired",
            StopReason::MaxIterations => "MaxIterations",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub final_image: ImageVector,
    pub stop_iteration: usize,
    pub stop_reason: StopReason,
    /// Objective at `k = 0..=stop_iteration`.
    pub objective_trace: Vec<f64>,
    /// Rule evaluations at `k = 1..=stop_iteration`.
    pub rule_trace: RuleTrace,
}

/// How long a multi-rule run keeps iterating.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    /// Stop once every rule has fired (or at `max_iter`).
    UntilAllFired,
    /// Always iterate to `max_iter`; traces cover the whole run.
    Full,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub max_iter: usize,
    pub x0: Option<ImageVector>,
    pub horizon: Horizon,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            max_iter: DEFAULT_MAX_ITER,
            x0: None,
            horizon: Horizon::UntilAllFired,
        }
    }
}

impl RunOptions {
    pub fn max_iter(max_iter: usize) -> Self {
        RunOptions {
            max_iter,
            ..Self::default()
        }
    }

    pub fn start(self, x0: ImageVector) -> Self {
        RunOptions { x0: Some(x0), ..self }
    }

    pub fn horizon(self, horizon: Horizon) -> Self {
        RunOptions { horizon, ..self }
    }
}

/// Output of [`run_rules`]: one result per rule, plus full-length traces.
#[derive(Debug, Clone)]
pub struct MultiRun {
    pub results: Vec<ReconstructionResult>,
    /// Every evaluation of each rule over the whole run, including those
    /// after its first firing.
    pub traces: Vec<RuleTrace>,
    /// Objective at `k = 0..=iterations`.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub last: IterationState,
}

/// Runs one solver trajectory and monitors several rules along it.
///
/// Each result is exactly what [`run`] would report for that rule alone; the
/// rules never influence the iterates. `observer` sees every state from
/// `k = 0` on.
pub fn run_rules(
    problem: &Problem<'_>,
    solver: SolverKind,
    rules: &mut [StoppingRule],
    options: &RunOptions,
    mut observer: impl FnMut(&IterationState),
) -> Result<MultiRun> {
    solver.check_noise(problem.noise())?;
    for rule in rules.iter() {
        rule.check_noise(problem.noise())?;
    }
    if options.max_iter == 0 {
        return Err(Error::invalid("max_iter", "must be at least 1"));
    }
    let op = problem.op();
    let x0 = match &options.x0 {
        Some(x0) => x0.clone(),
        None => default_start(op, problem.data())?,
    };
    let mut state = IterationState::new(op, x0)?;
    for rule in rules.iter_mut() {
        rule.reset(&state);
    }
    observer(&state);

    let mut objective_trace = vec![problem.objective(&state)?];
    let mut traces = vec![RuleTrace::default(); rules.len()];
    let mut stops: Vec<Option<(usize, ImageVector)>> = vec![None; rules.len()];

    while state.k() < options.max_iter {
        state = step(solver, &state, problem)?;
        objective_trace.push(problem.objective(&state)?);
        observer(&state);
        for (i, rule) in rules.iter_mut().enumerate() {
            let eval = rule.evaluate(&state, problem)?;
            traces[i].push(state.k(), eval);
            if eval.fired && stops[i].is_none() {
                stops[i] = Some((state.k(), state.iterate().clone()));
            }
        }
        if options.horizon == Horizon::UntilAllFired && stops.iter().all(Option::is_some) {
            break;
        }
    }

    let iterations = state.k();
    let results = stops
        .into_iter()
        .zip(&traces)
        .map(|(stop, trace)| {
            let (stop_iteration, final_image, stop_reason) = match stop {
                Some((k, image)) => (k, image, StopReason::RuleFired),
                None => (iterations, state.iterate().clone(), StopReason::MaxIterations),
            };
            ReconstructionResult {
                final_image,
                stop_iteration,
                stop_reason,
                objective_trace: objective_trace[..=stop_iteration].to_vec(),
                rule_trace: trace.truncated(stop_iteration),
            }
        })
        .collect();

    Ok(MultiRun {
        results,
        traces,
        objective_trace,
        iterations,
        last: state,
    })
}

/// Iterates from `x⁰` (flux-matched flat start when `None`) until `rule`
/// fires or `max_iter` updates have been made.
pub fn run(
    problem: &Problem<'_>,
    solver: SolverKind,
    rule: &mut StoppingRule,
    x0: Option<ImageVector>,
    max_iter: usize,
) -> Result<ReconstructionResult> {
    let options = RunOptions {
        max_iter,
        x0,
        horizon: Horizon::UntilAllFired,
    };
    let mut run = run_rules(problem, solver, std::slice::from_mut(rule), &options, |_| {})?;
    Ok(run.results.remove(0))
}

/// Plain iteration without rules: calls `observer` on `k = 0..=iterations`.
pub fn iterate(
    problem: &Problem<'_>,
    solver: SolverKind,
    x0: Option<ImageVector>,
    iterations: usize,
    mut observer: impl FnMut(&IterationState) -> Result<()>,
) -> Result<IterationState> {
    solver.check_noise(problem.noise())?;
    let x0 = match x0 {
        Some(x0) => x0,
        None => default_start(problem.op(), problem.data())?,
    };
    let mut state = IterationState::new(problem.op(), x0)?;
    observer(&state)?;
    for _ in 0..iterations {
        state = step(solver, &state, problem)?;
        observer(&state)?;
    }
    Ok(state)
}
