//! Stopping rules of the form `lhs(x⁽ᵏ⁾, y) ≤ τ · rhs`.
//!
//! Classical discrepancy rules compare a data-fit statistic with its expected
//! value; on data outside the cone `H(𝒞)` that statistic has a positive limit
//! and the rule may never fire. The CBR rules use `‖x ⊙ ∇L_y(x)‖²`, which
//! vanishes at every constrained ML solution.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{check_len, Error, Result};
use crate::io;
use crate::objectives::{self, NoiseModel};
use crate::operators::{DataVector, ImageVector};
use crate::solvers::{IterationState, Problem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    /// `‖Hx − y‖² ≤ τNσ²`
    MorozovGaussian,
    /// `‖Hx − y‖² ≤ τΣ(Hx)ᵢ`
    MorozovPoisson,
    /// `Σ(Hx − y)ᵢ²/(Hx)ᵢ ≤ τN`
    Pearson,
    /// `(2/N)·D_KL ≤ τ`
    PoissonDiscrepancy,
    /// `‖x ⊙ Hᵀ(Hx − y)‖² ≤ τ σ² Σ xⱼ²(H₂ᵀ1)ⱼ`
    CbrGaussian,
    /// `‖x ⊙ Hᵀ(1 − y/Hx)‖² ≤ τ Σ xⱼ²(H₂ᵀ(1/Hx))ⱼ`
    CbrPoisson,
    /// Fires at the first iterate whose distance to a known truth does not
    /// decrease.
    L2Oracle,
}

impl Criterion {
    pub const ALL: [Criterion; 7] = [
        Criterion::MorozovGaussian,
        Criterion::MorozovPoisson,
        Criterion::Pearson,
        Criterion::PoissonDiscrepancy,
        Criterion::CbrGaussian,
        Criterion::CbrPoisson,
        Criterion::L2Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::MorozovGaussian => "morozov-gaussian",
            Criterion::MorozovPoisson => "morozov-poisson",
            Criterion::Pearson => "pearson",
            Criterion::PoissonDiscrepancy => "poisson-discrepancy",
            Criterion::CbrGaussian => "cbr-gaussian",
            Criterion::CbrPoisson => "cbr-poisson",
            Criterion::L2Oracle => "l2-oracle",
        }
    }

    pub fn supports(self, noise: NoiseModel) -> bool {
        match self {
            Criterion::MorozovGaussian | Criterion::CbrGaussian => !noise.is_poisson(),
            Criterion::MorozovPoisson
            | Criterion::Pearson
            | Criterion::PoissonDiscrepancy
            | Criterion::CbrPoisson => noise.is_poisson(),
            Criterion::L2Oracle => true,
        }
    }

    /// The CBR rule matching `noise`.
    pub fn cbr_for(noise: NoiseModel) -> Self {
        if noise.is_poisson() {
            Criterion::CbrPoisson
        } else {
            Criterion::CbrGaussian
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == key)
            .ok_or_else(|| Error::invalid("rule", format!("unknown rule `{s}`")))
    }
}

/// `1/σ²` for the Gaussian CBR, `N/Σy` for the Poisson CBR, `1` otherwise.
pub fn default_tau(criterion: Criterion, noise: NoiseModel, data: &DataVector) -> Result<f64> {
    match criterion {
        Criterion::CbrGaussian => {
            let sigma = noise.sigma().ok_or_else(|| Error::IncompatibleRule {
                rule: criterion.to_string(),
                noise: noise.to_string(),
            })?;
            Ok(1.0 / (sigma * sigma))
        }
        Criterion::CbrPoisson => {
            let total = data.sum();
            if !(total > 0.0) {
                return Err(Error::invalid("data", "total counts must be positive for the Poisson CBR default tau"));
            }
            Ok(data.len() as f64 / total)
        }
        _ => Ok(1.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleEvaluation {
    pub lhs: f64,
    pub rhs: f64,
    pub fired: bool,
}

impl RuleEvaluation {
    fn compare(lhs: f64, rhs: f64) -> Self {
        RuleEvaluation {
            lhs,
            rhs,
            fired: lhs <= rhs,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StoppingRule {
    criterion: Criterion,
    tau: f64,
    truth: Option<ImageVector>,
    previous_distance: Option<f64>,
}

impl StoppingRule {
    pub fn new(criterion: Criterion, tau: f64) -> Result<Self> {
        if criterion == Criterion::L2Oracle {
            return Err(Error::invalid("rule", "the L2 oracle needs a reference image"));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid("tau", format!("must be > 0, got {tau}")));
        }
        Ok(StoppingRule {
            criterion,
            tau,
            truth: None,
            previous_distance: None,
        })
    }

    pub fn with_default_tau(criterion: Criterion, noise: NoiseModel, data: &DataVector) -> Result<Self> {
        Self::new(criterion, default_tau(criterion, noise, data)?)
    }

    pub fn l2_oracle(truth: ImageVector) -> Self {
        StoppingRule {
            criterion: Criterion::L2Oracle,
            tau: 1.0,
            truth: Some(truth),
            previous_distance: None,
        }
    }

    pub fn criterion(&self) -> Criterion {
        self.criterion
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn check_noise(&self, noise: NoiseModel) -> Result<()> {
        if !self.criterion.supports(noise) {
            return Err(Error::IncompatibleRule {
                rule: self.criterion.to_string(),
                noise: noise.to_string(),
            });
        }
        Ok(())
    }

    /// Called once with the initial state before the first evaluation.
    pub fn reset(&mut self, initial: &IterationState) {
        self.previous_distance = self
            .truth
            .as_ref()
            .filter(|t| t.len() == initial.iterate().len())
            .map(|t| distance(initial.iterate().as_slice(), t.as_slice()));
    }

    /// Evaluates the rule at `state`. For the L2 oracle `lhs` is the previous
    /// distance and `rhs` the current one, so that firing still means
    /// `lhs ≤ rhs`.
    pub fn evaluate(&mut self, state: &IterationState, problem: &Problem<'_>) -> Result<RuleEvaluation> {
        self.check_noise(problem.noise())?;
        let tau = self.tau;
        let op = problem.op();
        let y = problem.data().as_slice();
        let hx = state.forward().as_slice();
        let x = state.iterate().as_slice();
        let n = y.len() as f64;

        let eval = match self.criterion {
            Criterion::MorozovGaussian => {
                let sigma = problem.noise().sigma().expect("checked gaussian");
                RuleEvaluation::compare(objectives::least_squares(y, hx), tau * n * sigma * sigma)
            }
            Criterion::MorozovPoisson => {
                objectives::inverse_forward(hx)?;
                let flux: f64 = hx.iter().sum();
                RuleEvaluation::compare(objectives::least_squares(y, hx), tau * flux)
            }
            Criterion::Pearson => {
                let inv = objectives::inverse_forward(hx)?;
                let lhs = hx
                    .iter()
                    .zip(y)
                    .zip(&inv)
                    .map(|((h, y), w)| (h - y) * (h - y) * w)
                    .sum();
                RuleEvaluation::compare(lhs, tau * n)
            }
            Criterion::PoissonDiscrepancy => {
                let kl = objectives::kl_divergence(y, hx)?;
                RuleEvaluation::compare(2.0 / n * kl, tau)
            }
            Criterion::CbrGaussian => {
                let sigma = problem.noise().sigma().expect("checked gaussian");
                let gradient = objectives::gaussian_gradient(state.gram(op), problem.backprojected_data());
                let lhs = objectives::weighted_norm_sq(x, &gradient);
                let expected = objectives::gaussian_expected(
                    x,
                    op.squared_column_sums().as_slice().expect("contiguous"),
                    sigma,
                );
                RuleEvaluation::compare(lhs, tau * expected)
            }
            Criterion::CbrPoisson => {
                let inv = objectives::inverse_forward(hx)?;
                let gradient = objectives::poisson_gradient(
                    op.column_sums().as_slice().expect("contiguous"),
                    state.backprojected_ratio(problem)?,
                );
                let lhs = objectives::weighted_norm_sq(x, &gradient);
                let mut back = vec![0.0; op.n_params()];
                op.squared_adjoint_into(&inv, &mut back);
                RuleEvaluation::compare(lhs, tau * objectives::poisson_expected(x, &back))
            }
            Criterion::L2Oracle => {
                let truth = self.truth.as_ref().expect("oracle has truth");
                check_len("oracle truth", x.len(), truth.len())?;
                let current = distance(x, truth.as_slice());
                let previous = self.previous_distance.replace(current).unwrap_or(f64::INFINITY);
                RuleEvaluation::compare(previous, current)
            }
        };
        Ok(eval)
    }
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleRecord {
    pub k: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub fired: bool,
}

/// Per-iteration `(k, lhs, rhs, fired)` records of one rule.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RuleTrace {
    records: Vec<RuleRecord>,
}

impl RuleTrace {
    pub fn push(&mut self, k: usize, eval: RuleEvaluation) {
        self.records.push(RuleRecord {
            k,
            lhs: eval.lhs,
            rhs: eval.rhs,
            fired: eval.fired,
        });
    }

    pub fn records(&self) -> &[RuleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Iteration of the first fired record.
    pub fn first_fired(&self) -> Option<usize> {
        self.records.iter().find(|r| r.fired).map(|r| r.k)
    }

    /// Records with `k ≤ last`.
    pub fn truncated(&self, last: usize) -> RuleTrace {
        RuleTrace {
            records: self.records.iter().copied().filter(|r| r.k <= last).collect(),
        }
    }

    /// Columns `k,lhs,rhs,fired` with `fired` as `0`/`1`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = io::csv_writer(path)?;
        w.write_record(["k", "lhs", "rhs", "fired"])?;
        for r in &self.records {
            w.write_record([
                r.k.to_string(),
                io::format_f64(r.lhs),
                io::format_f64(r.rhs),
                u8::from(r.fired).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            reason,
        };
        let mut records = io::csv_reader(path)?.into_records();
        let header = records.next().ok_or_else(|| bad("empty file".into()))??;
        if header.iter().ne(["k", "lhs", "rhs", "fired"]) {
            return Err(bad("expected header `k,lhs,rhs,fired`".into()));
        }
        let mut trace = RuleTrace::default();
        for r in records {
            let r = r?;
            if r.len() != 4 {
                return Err(bad(format!("record has {} fields", r.len())));
            }
            let k = r[0].parse().map_err(|_| bad(format!("bad k `{}`", &r[0])))?;
            let lhs = io::parse_f64(&r[1]).map_err(&bad)?;
            let rhs = io::parse_f64(&r[2]).map_err(&bad)?;
            let fired = match &r[3] {
                "1" => true,
                "0" => false,
                other => return Err(bad(format!("bad fired flag `{other}`"))),
            };
            trace.records.push(RuleRecord { k, lhs, rhs, fired });
        }
        Ok(trace)
    }
}
