//! Experiment configuration (TOML) and its resolution into library objects.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::objectives::NoiseModel;
use crate::operators::{build_dense_positive, Boundary, BlurSpec, DataVector, ForwardOperator, ImageVector, DEFAULT_FLOOR};
use crate::simkit::{self, PhantomSpec};
use crate::solvers::{SolverKind, DEFAULT_MAX_ITER};
use crate::stopping::{default_tau, Criterion, StoppingRule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OperatorConfig {
    Blur {
        rows: usize,
        cols: usize,
        psf_sigma: f64,
        #[serde(default = "default_floor")]
        floor: f64,
        #[serde(default = "one")]
        gain: f64,
        #[serde(default)]
        periodic: bool,
    },
    Dense {
        n: usize,
        m: usize,
        seed: u64,
        #[serde(default = "default_floor")]
        floor: f64,
    },
    File {
        path: PathBuf,
    },
}

fn default_floor() -> f64 {
    DEFAULT_FLOOR
}

fn one() -> f64 {
    1.0
}

impl OperatorConfig {
    pub fn build(&self) -> Result<ForwardOperator> {
        match self {
            OperatorConfig::Blur {
                rows,
                cols,
                psf_sigma,
                floor,
                gain,
                periodic,
            } => BlurSpec::new(*rows, *cols, *psf_sigma)
                .floor(*floor)
                .gain(*gain)
                .boundary(if *periodic { Boundary::Periodic } else { Boundary::Truncated })
                .build(),
            OperatorConfig::Dense { n, m, seed, floor } => build_dense_positive(*n, *m, *seed, *floor),
            OperatorConfig::File { path } => ForwardOperator::read_csv(path),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub model: NoiseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Poisson only: rescale the phantom so that `Σ Hx̄` equals this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_counts: Option<f64>,
}

impl NoiseConfig {
    pub fn model(&self) -> Result<NoiseModel> {
        match self.model {
            NoiseKind::Gaussian => {
                let sigma = self
                    .sigma
                    .ok_or_else(|| Error::invalid("noise.sigma", "required for the gaussian model"))?;
                if self.total_counts.is_some() {
                    return Err(Error::invalid("noise.total_counts", "only valid for the poisson model"));
                }
                NoiseModel::gaussian(sigma)
            }
            NoiseKind::Poisson => {
                if self.sigma.is_some() {
                    return Err(Error::invalid("noise.sigma", "not used by the poisson model"));
                }
                if let Some(t) = self.total_counts {
                    if !(t > 0.0 && t.is_finite()) {
                        return Err(Error::invalid("noise.total_counts", "must be > 0"));
                    }
                }
                Ok(NoiseModel::Poisson)
            }
        }
    }
}

/// `tau = 1.5` or `tau = "default"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TauConfig {
    Value(f64),
    Named(DefaultTau),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefaultTau {
    Default,
}

impl Default for TauConfig {
    fn default() -> Self {
        TauConfig::Named(DefaultTau::Default)
    }
}

impl std::str::FromStr for TauConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("default") {
            return Ok(TauConfig::default());
        }
        let v = io::parse_f64(s).map_err(|e| Error::invalid("tau", e))?;
        Ok(TauConfig::Value(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<String>,
    /// Empty means the CBR rule matching the noise model.
    #[serde(default)]
    pub rules: Vec<String>,
    #[serde(default)]
    pub tau: TauConfig,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub fail_on_no_stop: bool,
    #[serde(default = "default_box_side")]
    pub box_side: usize,
    /// Keep iterating to `max_iter` and record every rule at every iteration.
    #[serde(default)]
    pub full_trace: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}

fn default_box_side() -> usize {
    crate::evaluation::DEFAULT_BOX_SIDE
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seeds: default_seeds(),
            solver: None,
            rules: Vec::new(),
            tau: TauConfig::default(),
            max_iter: default_max_iter(),
            fail_on_no_stop: false,
            box_side: default_box_side(),
            full_trace: false,
            out: None,
        }
    }
}

/// Existing data instead of simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with `noisy_seed<s>.csv` files, as written by `simulate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// A single data vector used for every seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    /// Reference image for errors and photometry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// σ values (Gaussian) or total expected counts (Poisson).
    pub levels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub operator: OperatorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    pub noise: NoiseConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    /// Written by the commands; ignored on input.
    #[serde(default, skip_serializing)]
    pub manifest: Option<toml::Table>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::invalid("config", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidParameter { name, reason } => Error::InvalidParameter {
                name,
                reason: format!("{reason} (in {})", path.display()),
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let noise = self.noise.model()?;
        if self.run.seeds.is_empty() {
            return Err(Error::invalid("run.seeds", "at least one seed is required"));
        }
        if self.run.max_iter == 0 {
            return Err(Error::invalid("run.max_iter", "must be at least 1"));
        }
        if self.run.box_side.is_multiple_of(2) {
            return Err(Error::invalid("run.box_side", "must be odd"));
        }
        if let TauConfig::Value(t) = self.run.tau {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid("run.tau", format!("must be > 0, got {t}")));
            }
        }
        let solver = self.solver()?;
        solver.check_noise(noise)?;
        let criteria = self.criteria()?;
        for c in &criteria {
            if !c.supports(noise) {
                return Err(Error::IncompatibleRule {
                    rule: c.to_string(),
                    noise: noise.to_string(),
                });
            }
        }
        if let Some(p) = &self.phantom {
            p.validate()?;
        }
        let data = self.data.as_ref();
        if let Some(d) = data {
            if d.dir.is_some() && d.file.is_some() {
                return Err(Error::invalid("data", "set either `dir` or `file`, not both"));
            }
        }
        let has_data = data.is_some_and(|d| d.dir.is_some() || d.file.is_some());
        if !has_data && self.phantom.is_none() {
            return Err(Error::invalid("phantom", "a phantom or a data source is required"));
        }
        let has_truth = self.phantom.is_some() || data.is_some_and(|d| d.truth.is_some());
        if criteria.contains(&Criterion::L2Oracle) && !has_truth {
            return Err(Error::invalid("run.rules", "l2-oracle needs a phantom or data.truth"));
        }
        if let Some(s) = &self.sweep {
            for &l in &s.levels {
                if !(l > 0.0 && l.is_finite()) {
                    return Err(Error::invalid("sweep.levels", format!("levels must be > 0, got {l}")));
                }
            }
        }
        Ok(())
    }

    pub fn noise_model(&self) -> Result<NoiseModel> {
        self.noise.model()
    }

    pub fn solver(&self) -> Result<SolverKind> {
        let noise = self.noise.model()?;
        match &self.run.solver {
            Some(s) => s.parse(),
            None => Ok(SolverKind::for_noise(noise)),
        }
    }

    pub fn criteria(&self) -> Result<Vec<Criterion>> {
        if self.run.rules.is_empty() {
            return Ok(vec![Criterion::cbr_for(self.noise.model()?)]);
        }
        let mut out: Vec<Criterion> = Vec::new();
        for r in &self.run.rules {
            let c: Criterion = r.parse()?;
            if out.contains(&c) {
                return Err(Error::invalid("run.rules", format!("rule `{c}` listed twice")));
            }
            out.push(c);
        }
        Ok(out)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.run.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

/// Everything a command needs, built once from a validated config.
#[derive(Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub op: ForwardOperator,
    pub noise: NoiseModel,
    pub solver: SolverKind,
    pub criteria: Vec<Criterion>,
    /// Phantom after any count rescaling, shaped.
    pub truth: Option<ImageVector>,
    pub phantom_spec: Option<PhantomSpec>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let op = config.operator.build()?;
        let noise = config.noise_model()?;
        let truth = match (&config.phantom, config.data.as_ref().and_then(|d| d.truth.as_ref())) {
            (_, Some(path)) => Some(io::read_image_csv(path)?),
            (Some(spec), None) => {
                let phantom = simkit::build_phantom(spec)?;
                Some(match config.noise.total_counts {
                    Some(total) => scale_to_counts(&op, &phantom, total)?,
                    None => phantom,
                })
            }
            (None, None) => None,
        };
        if let Some(t) = &truth {
            crate::error::check_len("phantom", op.n_params(), t.len())?;
        }
        Ok(Experiment {
            solver: config.solver()?,
            criteria: config.criteria()?,
            phantom_spec: config.phantom.clone(),
            config,
            op,
            noise,
            truth,
        })
    }

    /// `H x̄` for the (rescaled) phantom.
    pub fn clean(&self) -> Result<Option<DataVector>> {
        self.truth.as_ref().map(|t| self.op.apply(t)).transpose()
    }

    /// Data for `seed`: read from `data.dir` / `data.file`, or simulated.
    pub fn data(&self, seed: u64) -> Result<DataVector> {
        if let Some(d) = &self.config.data {
            if let Some(dir) = &d.dir {
                return io::read_data_csv(dir.join(noisy_file_name(seed)));
            }
            if let Some(file) = &d.file {
                return io::read_data_csv(file);
            }
        }
        let clean = self
            .clean()?
            .ok_or_else(|| Error::invalid("phantom", "needed to simulate data"))?;
        simkit::sample_noise(&clean, self.noise, seed)
    }

    /// Stopping rules for one data vector, with `tau = "default"` resolved by
    /// `default`.
    pub fn rules_with(
        &self,
        data: &DataVector,
        noise: NoiseModel,
        default: impl Fn(Criterion, NoiseModel, &DataVector) -> Result<f64>,
    ) -> Result<Vec<StoppingRule>> {
        self.criteria
            .iter()
            .map(|&c| {
                if c == Criterion::L2Oracle {
                    let truth = self
                        .truth
                        .clone()
                        .ok_or_else(|| Error::invalid("run.rules", "l2-oracle needs a reference image"))?;
                    return Ok(StoppingRule::l2_oracle(truth));
                }
                let tau = match self.config.run.tau {
                    TauConfig::Value(t) => t,
                    TauConfig::Named(DefaultTau::Default) => default(c, noise, data)?,
                };
                StoppingRule::new(c, tau)
            })
            .collect()
    }

    pub fn rules(&self, data: &DataVector) -> Result<Vec<StoppingRule>> {
        self.rules_with(data, self.noise, default_tau)
    }
}

/// `x̄` rescaled so that `Σ Hx̄ = total`.
pub fn scale_to_counts(op: &ForwardOperator, phantom: &ImageVector, total: f64) -> Result<ImageVector> {
    let current = op.apply(phantom)?.sum();
    if !(current > 0.0) {
        return Err(Error::invalid("phantom", "has zero projected flux"));
    }
    phantom.scaled(total / current)
}

pub fn noisy_file_name(seed: u64) -> String {
    format!("noisy_seed{seed}.csv")
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[operator]
kind = "blur"
rows = 8
cols = 8
psf_sigma = 1.5

[phantom]
rows = 8
cols = 8

[[phantom.source]]
label = "A"
col = 3.0
row = 4.0
variance = 1.0
amplitude = 2.0

[noise]
model = "gaussian"
sigma = 0.5
"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_toml(BASE).unwrap();
        assert_eq!(c.run.seeds, vec![1]);
        assert_eq!(c.run.max_iter, 5000);
        assert_eq!(c.run.tau, TauConfig::default());
        assert_eq!(c.criteria().unwrap(), vec![Criterion::CbrGaussian]);
        assert_eq!(c.solver().unwrap(), SolverKind::Isra);
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn tau_accepts_number_or_default() {
        let c = ExperimentConfig::from_toml(&format!("{BASE}\n[run]\ntau = 0.25\n")).unwrap();
        assert_eq!(c.run.tau, TauConfig::Value(0.25));
        let c = ExperimentConfig::from_toml(&format!("{BASE}\n[run]\ntau = \"default\"\n")).unwrap();
        assert_eq!(c.run.tau, TauConfig::default());
        assert!(ExperimentConfig::from_toml(&format!("{BASE}\n[run]\ntau = \"auto\"\n")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("{BASE}\n[run]\ntau = -1.0\n")).is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let err = |text: &str| match ExperimentConfig::from_toml(text).unwrap_err() {
            Error::InvalidParameter { name, .. } => name.to_string(),
            other => other.to_string(),
        };
        let no_sources = BASE.replace(
            "[[phantom.source]]\nlabel = \"A\"\ncol = 3.0\nrow = 4.0\nvariance = 1.0\namplitude = 2.0\n",
            "",
        );
        assert_eq!(err(&no_sources), "phantom.source");
        assert_eq!(err(&format!("{BASE}\n[run]\nseeds = []\n")), "run.seeds");
        assert!(err(&format!("{BASE}\n[run]\nrules = [\"pearson\"]\n")).contains("pearson"));
        assert_eq!(err(&BASE.replace("sigma = 0.5", "")), "noise.sigma");
        assert!(err(&format!("{BASE}\n[run]\nsolver = \"em\"\n")).contains("solver em"));
    }

    #[test]
    fn experiment_simulates_deterministically() {
        let e = Experiment::new(ExperimentConfig::from_toml(BASE).unwrap()).unwrap();
        assert_eq!(e.data(3).unwrap(), e.data(3).unwrap());
        assert_eq!(e.truth.as_ref().unwrap().shape(), Some((8, 8)));
    }

    #[test]
    fn total_counts_rescale_the_phantom() {
        let text = BASE.replace("model = \"gaussian\"\nsigma = 0.5", "model = \"poisson\"\ntotal_counts = 1000.0");
        let e = Experiment::new(ExperimentConfig::from_toml(&text).unwrap()).unwrap();
        let clean = e.clean().unwrap().unwrap();
        assert!((clean.sum() - 1000.0).abs() < 1e-9);
        assert_eq!(e.criteria, vec![Criterion::CbrPoisson]);
    }
}
