//! Phantoms, seeded noise, and data certified to lie outside `H(𝒞)`.
//!
//! Pixel `(col, row)` has flat index `row * cols + col` with row 0 at the
//! bottom. Noise draws use ChaCha8 with one stream per data component, so a
//! component's value depends only on the seed, its index and its mean.

use std::path::Path;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{self, NoiseModel};
use crate::operators::{DataVector, ForwardOperator, ImageVector};
use crate::solvers::{self, IterationState, Problem, SolverKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSource {
    #[serde(default)]
    pub label: String,
    pub col: f64,
    pub row: f64,
    /// Pixels².
    pub variance: f64,
    /// Peak intensity.
    pub amplitude: f64,
}

impl GaussianSource {
    pub fn new(label: impl Into<String>, center: (f64, f64), variance: f64, amplitude: f64) -> Self {
        GaussianSource {
            label: label.into(),
            col: center.0,
            row: center.1,
            variance,
            amplitude,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.col, self.row)
    }

    fn value_at(&self, col: f64, row: f64) -> f64 {
        let d2 = (col - self.col).powi(2) + (row - self.row).powi(2);
        self.amplitude * (-d2 / (2.0 * self.variance)).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub rows: usize,
    pub cols: usize,
    #[serde(rename = "source", default)]
    pub sources: Vec<GaussianSource>,
}

impl PhantomSpec {
    pub fn new(rows: usize, cols: usize, sources: Vec<GaussianSource>) -> Result<Self> {
        let spec = PhantomSpec { rows, cols, sources };
        spec.validate()?;
        Ok(spec)
    }

    /// Four-source flare on a 64×64 grid: a bright core `C`, two footpoints
    /// `L` and `LR`, and a faint `UR`.
    pub fn flare() -> Self {
        PhantomSpec {
            rows: 64,
            cols: 64,
            sources: vec![
                GaussianSource::new("L", (16.0, 32.0), 0.64, 1.28),
                GaussianSource::new("C", (32.0, 32.0), 0.64, 1.6),
                GaussianSource::new("UR", (42.0, 45.0), 0.48, 0.6),
                GaussianSource::new("LR", (42.0, 19.0), 0.64, 1.28),
            ],
        }
    }

    /// The flare with centers rescaled to a `size × size` grid. Variances and
    /// amplitudes are kept.
    pub fn flare_on(size: usize) -> Result<Self> {
        let factor = size as f64 / 64.0;
        let mut spec = Self::flare();
        spec.rows = size;
        spec.cols = size;
        for s in &mut spec.sources {
            s.col *= factor;
            s.row *= factor;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::invalid("phantom", "rows and cols must be positive"));
        }
        if self.sources.is_empty() {
            return Err(Error::invalid("phantom.source", "at least one source is required"));
        }
        for (i, s) in self.sources.iter().enumerate() {
            let inside = (0.0..=(self.cols - 1) as f64).contains(&s.col)
                && (0.0..=(self.rows - 1) as f64).contains(&s.row);
            if !inside {
                return Err(Error::invalid(
                    "phantom.source",
                    format!("source {i} center ({}, {}) is outside the grid", s.col, s.row),
                ));
            }
            if !(s.variance > 0.0 && s.variance.is_finite()) {
                return Err(Error::invalid("phantom.source.variance", format!("source {i}: must be > 0")));
            }
            if !(s.amplitude > 0.0 && s.amplitude.is_finite()) {
                return Err(Error::invalid("phantom.source.amplitude", format!("source {i}: must be > 0")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid("phantom", e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: PhantomSpec = toml::from_str(text).map_err(|e| Error::invalid("phantom", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

pub fn build_phantom(spec: &PhantomSpec) -> Result<ImageVector> {
    spec.validate()?;
    let mut values = Vec::with_capacity(spec.len());
    for row in 0..spec.rows {
        for col in 0..spec.cols {
            let (c, r) = (col as f64, row as f64);
            values.push(spec.sources.iter().map(|s| s.value_at(c, r)).sum());
        }
    }
    ImageVector::from_vec(values)?.with_shape(spec.rows, spec.cols)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub clean: DataVector,
    pub noisy: DataVector,
    pub seed: u64,
    pub noise: NoiseModel,
}

impl NoisySample {
    pub fn simulate(op: &ForwardOperator, phantom: &ImageVector, noise: NoiseModel, seed: u64) -> Result<Self> {
        let clean = op.apply(phantom)?;
        let noisy = sample_noise(&clean, noise, seed)?;
        Ok(NoisySample {
            clean,
            noisy,
            seed,
            noise,
        })
    }
}

fn component_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Gaussian: `clean + σ·N(0,1)`; Poisson: independent draws with means
/// `clean`. Deterministic in `seed`.
pub fn sample_noise(clean: &DataVector, noise: NoiseModel, seed: u64) -> Result<DataVector> {
    let mean = clean.as_slice();
    let values: Vec<f64> = match noise {
        NoiseModel::Gaussian { sigma } => mean
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let z: f64 = component_rng(seed, i).sample(StandardNormal);
                m + sigma * z
            })
            .collect(),
        NoiseModel::Poisson => {
            clean.ensure_nonnegative()?;
            mean.iter()
                .enumerate()
                .map(|(i, &m)| poisson(&mut component_rng(seed, i), m))
                .collect()
        }
    };
    DataVector::new(Array1::from(values))
}

/// Poisson variate: sequential inversion below mean 10, Hörmann's PTRS
/// transformed rejection above.
pub fn poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    if mean < 10.0 {
        let mut p = (-mean).exp();
        let mut cdf = p;
        let u: f64 = rng.random();
        let mut k = 0.0;
        while u > cdf {
            k += 1.0;
            p *= mean / k;
            cdf += p;
            if p <= 0.0 {
                break;
            }
        }
        return k;
    }
    let slam = mean.sqrt();
    let loglam = mean.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let v_r = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.random::<f64>() - 0.5;
        let v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
        if us >= 0.07 && v <= v_r {
            return k;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
        let rhs = -mean + k * loglam - libm::lgamma(k + 1.0);
        if lhs <= rhs {
            return k;
        }
    }
}

/// Near-converged fit of `y` by the solver matching the noise model.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    /// Objective at the last iterate.
    pub limit_objective: f64,
    /// Half the limit objective, or the exact bound from negative data.
    pub floor: f64,
    pub iterations: usize,
    /// `‖x ⊙ ∇L_y(x)‖` at the last iterate.
    pub gradient_norm: f64,
}

pub const CERTIFY_MAX_ITER: usize = 20_000;
pub const CERTIFY_GRADIENT_TOL: f64 = 1e-14;
pub const MIN_FLOOR: f64 = 1e-6;

/// Certifies `y ∉ H(𝒞)` by iterating to near-convergence and checking that
/// the objective stays bounded away from zero.
///
/// Gaussian data with negative components are outside the cone outright;
/// then `D_LS ≥ Σ_{yᵢ<0} yᵢ²` and half of that bound is returned without
/// iterating.
pub fn certify_outside_cone(op: &ForwardOperator, y: &DataVector, noise: NoiseModel) -> Result<Certificate> {
    if !noise.is_poisson() {
        let bound: f64 = y.as_slice().iter().filter(|v| **v < 0.0).map(|v| v * v).sum();
        if 0.5 * bound > MIN_FLOOR {
            return Ok(Certificate {
                limit_objective: bound,
                floor: 0.5 * bound,
                iterations: 0,
                gradient_norm: f64::NAN,
            });
        }
    }
    let problem = Problem::new(op, y, noise)?;
    let solver = SolverKind::for_noise(noise);
    let mut state = IterationState::new(op, solvers::default_start(op, y)?)?;
    let mut gradient_norm = f64::INFINITY;
    while state.k() < CERTIFY_MAX_ITER {
        state = solvers::step(solver, &state, &problem)?;
        gradient_norm = kkt_norm(&state, &problem)?;
        if gradient_norm < CERTIFY_GRADIENT_TOL {
            break;
        }
    }
    let limit_objective = problem.objective(&state)?;
    let floor = 0.5 * limit_objective;
    if floor <= MIN_FLOOR {
        return Err(Error::Certification(format!(
            "limit objective {limit_objective:e} after {} iterations is not bounded away from zero",
            state.k()
        )));
    }
    Ok(Certificate {
        limit_objective,
        floor,
        iterations: state.k(),
        gradient_norm,
    })
}

fn kkt_norm(state: &IterationState, problem: &Problem<'_>) -> Result<f64> {
    let op = problem.op();
    let gradient = match problem.noise() {
        NoiseModel::Gaussian { .. } => objectives::gaussian_gradient(state.gram(op), problem.backprojected_data()),
        NoiseModel::Poisson => objectives::poisson_gradient(
            op.column_sums().as_slice().expect("contiguous"),
            state.backprojected_ratio(problem)?,
        ),
    };
    Ok(objectives::weighted_norm_sq(state.iterate().as_slice(), &gradient).sqrt())
}

/// Recipe for data that a nonnegative image cannot explain: the clean
/// signal `H x̄` is modulated by `1 + contrast·(−1)^(row+col)` over a data
/// grid with `pattern_cols` columns, scaled, and then noise is added.
#[derive(Debug, Clone, PartialEq)]
pub struct IllPosedRecipe {
    pub phantom: ImageVector,
    pub noise: NoiseModel,
    pub contrast: f64,
    pub count_scale: f64,
    pub pattern_cols: usize,
}

impl IllPosedRecipe {
    pub fn poisson(phantom: ImageVector) -> Self {
        let pattern_cols = phantom.shape().map_or(1, |(_, c)| c);
        IllPosedRecipe {
            phantom,
            noise: NoiseModel::Poisson,
            contrast: 0.5,
            count_scale: 1.0,
            pattern_cols,
        }
    }

    fn mean(&self, op: &ForwardOperator) -> Result<DataVector> {
        if !(0.0..1.0).contains(&self.contrast) {
            return Err(Error::invalid("contrast", "must be in [0, 1)"));
        }
        if !(self.count_scale > 0.0 && self.count_scale.is_finite()) {
            return Err(Error::invalid("count_scale", "must be > 0"));
        }
        let cols = self.pattern_cols.max(1);
        let clean = op.apply(&self.phantom)?;
        let values = clean
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let sign = if (i / cols + i % cols).is_multiple_of(2) { 1.0 } else { -1.0 };
                v * (1.0 + self.contrast * sign) * self.count_scale
            })
            .collect();
        DataVector::from_vec(values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IllPosedInstance {
    pub data: DataVector,
    pub floor: f64,
    /// Seed of the accepted attempt.
    pub seed: u64,
    pub certificate: Certificate,
}

pub const ILL_POSED_ATTEMPTS: u64 = 10;

/// Draws data from `recipe` and certifies it; on failure retries with
/// `seed + 1, …` for up to ten attempts.
pub fn build_ill_posed_instance(op: &ForwardOperator, recipe: &IllPosedRecipe, seed: u64) -> Result<IllPosedInstance> {
    let mean = recipe.mean(op)?;
    let mut last = None;
    for attempt in 0..ILL_POSED_ATTEMPTS {
        let s = seed.wrapping_add(attempt);
        let data = sample_noise(&mean, recipe.noise, s)?;
        match certify_outside_cone(op, &data, recipe.noise) {
            Ok(certificate) => {
                return Ok(IllPosedInstance {
                    data,
                    floor: certificate.floor,
                    seed: s,
                    certificate,
                })
            }
            Err(e @ Error::Certification(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(Error::Certification(format!(
        "no certified instance in {ILL_POSED_ATTEMPTS} attempts: {}",
        last.map(|e| e.to_string()).unwrap_or_default()
    )))
}
