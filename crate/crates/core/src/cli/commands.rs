//! The four experiment commands. Each writes its files into the output
//! directory and finishes with `manifest.toml`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::{noisy_file_name, scale_to_counts, Experiment, ExperimentConfig, OperatorConfig};
use crate::error::{Error, Result};
use crate::evaluation::{self, PhotometryReport};
use crate::io;
use crate::objectives::NoiseModel;
use crate::operators::{DataVector, ImageVector};
use crate::simkit;
use crate::solvers::{run_rules, Horizon, Problem, RunOptions, StopReason};
use crate::stopping::{default_tau, Criterion, RuleTrace};

pub const MANIFEST: &str = "manifest.toml";
pub const SUMMARY: &str = "summary.csv";
pub const SWEEP_TABLE: &str = "sweep.csv";
pub const SWEEP_RUNS: &str = "sweep_runs.csv";

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed{seed}"))
}

pub fn trace_file_name(c: Criterion) -> String {
    format!("trace_{c}.csv")
}

pub fn curves_file_name(c: Criterion) -> String {
    format!("curves_{c}.csv")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The effective config plus a `[manifest]` table; the file can be passed
/// back as `--config` to repeat the run.
fn write_manifest(out: &Path, config: &ExperimentConfig, command: &str, files: &[PathBuf]) -> Result<PathBuf> {
    let mut table = toml::Table::try_from(config).map_err(|e| Error::invalid("config", e.to_string()))?;
    let mut m = toml::Table::new();
    m.insert("command".into(), command.into());
    m.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    let seeds: Vec<toml::Value> = config.run.seeds.iter().map(|&s| toml::Value::Integer(s as i64)).collect();
    m.insert("seeds".into(), seeds.into());
    let mut names: Vec<String> = files
        .iter()
        .map(|f| f.strip_prefix(out).unwrap_or(f).to_string_lossy().replace('\\', "/"))
        .collect();
    names.sort();
    m.insert("files".into(), names.into());
    table.insert("manifest".into(), m.into());
    let text = toml::to_string(&table).map_err(|e| Error::invalid("config", e.to_string()))?;
    let path = out.join(MANIFEST);
    write_text(&path, &text)?;
    Ok(path)
}

fn image_shape(exp: &Experiment) -> Option<(usize, usize)> {
    if let Some(shape) = exp.truth.as_ref().and_then(ImageVector::shape) {
        return Some(shape);
    }
    match exp.config.operator {
        OperatorConfig::Blur { rows, cols, .. } => Some((rows, cols)),
        _ => None,
    }
}

/// Writes `<stem>.csv` (and `<stem>.pgm` when the image is 2D).
fn write_image(dir: &Path, stem: &str, image: &ImageVector, shape: Option<(usize, usize)>, files: &mut Vec<PathBuf>) -> Result<()> {
    let csv = dir.join(format!("{stem}.csv"));
    match shape {
        Some((rows, cols)) => {
            let image = image.clone().with_shape(rows, cols)?;
            io::write_image_csv(&csv, &image)?;
            let pgm = dir.join(format!("{stem}.pgm"));
            io::write_pgm(&pgm, &image)?;
            files.push(pgm);
        }
        None => io::write_vector_csv(&csv, image.as_slice())?,
    }
    files.push(csv);
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateOutput {
    pub files: Vec<PathBuf>,
    pub manifest: PathBuf,
}

/// Phantom image, clean data, one noisy data file per seed, manifest.
pub fn cmd_simulate(config: &ExperimentConfig) -> Result<SimulateOutput> {
    let exp = Experiment::new(config.clone())?;
    let truth = exp
        .truth
        .as_ref()
        .ok_or_else(|| Error::invalid("phantom", "simulate needs a phantom"))?;
    let out = config.out_dir();
    create_dir(&out)?;
    let mut files = Vec::new();
    write_image(&out, "phantom", truth, truth.shape(), &mut files)?;
    let clean = exp.op.apply(truth)?;
    let clean_path = out.join("clean.csv");
    io::write_data_csv(&clean_path, &clean)?;
    files.push(clean_path);
    let noisy: Vec<PathBuf> = config
        .run
        .seeds
        .par_iter()
        .map(|&seed| {
            let y = simkit::sample_noise(&clean, exp.noise, seed)?;
            let path = out.join(noisy_file_name(seed));
            io::write_data_csv(&path, &y)?;
            Ok(path)
        })
        .collect::<Result<_>>()?;
    files.extend(noisy);
    let manifest = write_manifest(&out, config, "simulate", &files)?;
    Ok(SimulateOutput { files, manifest })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub seed: u64,
    pub rule: Criterion,
    pub tau: f64,
    pub stop_iteration: usize,
    pub stop_reason: StopReason,
    pub objective: f64,
    pub l2_error: Option<f64>,
    pub photometry: Option<PhotometryReport>,
}

#[derive(Debug, Clone)]
pub struct ReconstructOutput {
    pub rows: Vec<SummaryRow>,
    pub files: Vec<PathBuf>,
    pub manifest: PathBuf,
}

impl ReconstructOutput {
    pub fn never_fired(&self) -> impl Iterator<Item = &SummaryRow> {
        self.rows.iter().filter(|r| r.stop_reason == StopReason::MaxIterations)
    }
}

fn write_k_series(path: &Path, column: &str, values: &[f64]) -> Result<()> {
    let mut w = io::csv_writer(path)?;
    w.write_record(["k", column])?;
    for (k, v) in values.iter().enumerate() {
        w.write_record([k.to_string(), io::format_f64(*v)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn reconstruct_seed(exp: &Experiment, seed: u64, out: &Path) -> Result<(Vec<SummaryRow>, Vec<PathBuf>)> {
    let run_cfg = &exp.config.run;
    let data = exp.data(seed)?;
    let problem = Problem::new(&exp.op, &data, exp.noise)?;
    let mut rules = exp.rules(&data)?;
    let horizon = if run_cfg.full_trace { Horizon::Full } else { Horizon::UntilAllFired };
    let options = RunOptions::max_iter(run_cfg.max_iter).horizon(horizon);
    let mut l2 = Vec::new();
    let truth = exp.truth.as_ref();
    let run = run_rules(&problem, exp.solver, &mut rules, &options, |s| {
        if let Some(t) = truth {
            l2.push(crate::stopping::distance(s.iterate().as_slice(), t.as_slice()));
        }
    })?;

    let dir = seed_dir(out, seed);
    create_dir(&dir)?;
    let shape = image_shape(exp);
    let mut files = Vec::new();
    let objective_path = dir.join("objective.csv");
    write_k_series(&objective_path, "objective", &run.objective_trace)?;
    files.push(objective_path);
    if truth.is_some() {
        let path = dir.join("l2_error.csv");
        write_k_series(&path, "l2_error", &l2)?;
        files.push(path);
    }

    let mut rows = Vec::new();
    let mut reports: Vec<(Criterion, PhotometryReport)> = Vec::new();
    for ((rule, result), full) in rules.iter().zip(&run.results).zip(&run.traces) {
        let c = rule.criterion();
        write_image(&dir, c.name(), &result.final_image, shape, &mut files)?;
        let trace_path = dir.join(trace_file_name(c));
        if run_cfg.full_trace { full } else { &result.rule_trace }.write_csv(&trace_path)?;
        files.push(trace_path);
        let photometry = match (truth, &exp.phantom_spec, shape) {
            (Some(t), Some(spec), Some((r, cl))) => {
                let recon = result.final_image.clone().with_shape(r, cl)?;
                let report = evaluation::photometry(t, &recon, spec, run_cfg.box_side)?;
                let path = dir.join(format!("photometry_{c}.csv"));
                report.write_csv(&path)?;
                files.push(path);
                reports.push((c, report.clone()));
                Some(report)
            }
            _ => None,
        };
        rows.push(SummaryRow {
            seed,
            rule: c,
            tau: rule.tau(),
            stop_iteration: result.stop_iteration,
            stop_reason: result.stop_reason,
            objective: *result.objective_trace.last().expect("k = 0 is always recorded"),
            l2_error: truth.map(|_| l2[result.stop_iteration]),
            photometry,
        });
    }
    if !reports.is_empty() {
        let path = dir.join("photometry.csv");
        write_photometry_table(&path, &reports)?;
        files.push(path);
    }
    Ok((rows, files))
}

/// Wide table: `source,flux` then `<rule>_flux,<rule>_ratio_percent` per rule.
fn write_photometry_table(path: &Path, reports: &[(Criterion, PhotometryReport)]) -> Result<()> {
    let mut w = io::csv_writer(path)?;
    let mut header = vec!["source".to_string(), "flux".to_string()];
    for (c, _) in reports {
        header.push(format!("{c}_flux"));
        header.push(format!("{c}_ratio_percent"));
    }
    w.write_record(&header)?;
    let first = &reports[0].1;
    for (i, s) in first.sources.iter().enumerate() {
        let mut rec = vec![s.label.clone(), io::format_f64(s.true_flux)];
        for (_, r) in reports {
            rec.push(io::format_f64(r.sources[i].reconstructed_flux));
            rec.push(io::format_f64(r.sources[i].ratio_percent));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = io::csv_writer(path)?;
    w.write_record([
        "seed",
        "rule",
        "tau",
        "stop_iteration",
        "stop_reason",
        "objective",
        "l2_error",
        "min_ratio_percent",
    ])?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.rule.to_string(),
            io::format_f64(r.tau),
            r.stop_iteration.to_string(),
            r.stop_reason.to_string(),
            io::format_f64(r.objective),
            r.l2_error.map(io::format_f64).unwrap_or_default(),
            r.photometry
                .as_ref()
                .map(|p| io::format_f64(p.min_ratio_percent()))
                .unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per seed: one image and one trace per rule, objective and error series,
/// photometry when the phantom is known. A `summary.csv` covers all seeds.
pub fn cmd_reconstruct(config: &ExperimentConfig) -> Result<ReconstructOutput> {
    let exp = Experiment::new(config.clone())?;
    let out = config.out_dir();
    create_dir(&out)?;
    let per_seed = config
        .run
        .seeds
        .par_iter()
        .map(|&seed| reconstruct_seed(&exp, seed, &out))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut files = Vec::new();
    for (r, f) in per_seed {
        rows.extend(r);
        files.extend(f);
    }
    let summary = out.join(SUMMARY);
    write_summary(&summary, &rows)?;
    files.push(summary);
    let manifest = write_manifest(&out, config, "reconstruct", &files)?;
    Ok(ReconstructOutput { rows, files, manifest })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvesOutput {
    pub files: Vec<PathBuf>,
}

/// Turns each stored trace into `k,lhs,rhs,log10_lhs,log10_rhs,fired,first_fired`.
pub fn cmd_curves(config: &ExperimentConfig) -> Result<CurvesOutput> {
    config.validate()?;
    let out = config.out_dir();
    let criteria = config.criteria()?;
    let mut files = Vec::new();
    for &seed in &config.run.seeds {
        let dir = seed_dir(&out, seed);
        for &c in &criteria {
            let trace = RuleTrace::read_csv(dir.join(trace_file_name(c)))?;
            if trace.is_empty() {
                return Err(Error::EmptyTrace(format!("seed {seed}, rule {c}")));
            }
            let path = dir.join(curves_file_name(c));
            write_curve(&path, &trace)?;
            files.push(path);
        }
    }
    Ok(CurvesOutput { files })
}

fn write_curve(path: &Path, trace: &RuleTrace) -> Result<()> {
    let first = trace.first_fired();
    let mut w = io::csv_writer(path)?;
    w.write_record(["k", "lhs", "rhs", "log10_lhs", "log10_rhs", "fired", "first_fired"])?;
    for r in trace.records() {
        w.write_record([
            r.k.to_string(),
            io::format_f64(r.lhs),
            io::format_f64(r.rhs),
            io::format_f64(r.lhs.log10()),
            io::format_f64(r.rhs.log10()),
            u8::from(r.fired).to_string(),
            u8::from(first == Some(r.k)).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `tau = "default"` in a sweep: the Gaussian CBR uses `τ = 1`, because
/// `1/σ²` would cancel the noise level out of its threshold; every other rule
/// uses its usual default.
pub fn sweep_tau(criterion: Criterion, noise: NoiseModel, data: &DataVector) -> Result<f64> {
    match criterion {
        Criterion::CbrGaussian => Ok(1.0),
        _ => default_tau(criterion, noise, data),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub level: f64,
    pub seed: u64,
    pub rule: Criterion,
    pub tau: f64,
    pub stop_iteration: usize,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub level: f64,
    pub rule: Criterion,
    pub median_stop_iteration: f64,
    pub fired: usize,
    pub seeds: usize,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub cells: Vec<SweepCell>,
    pub runs: Vec<SweepRun>,
    pub files: Vec<PathBuf>,
}

impl SweepOutput {
    /// Medians of `rule` in level order.
    pub fn medians(&self, rule: Criterion) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.rule == rule)
            .map(|c| c.median_stop_iteration)
            .collect()
    }
}

pub fn median(values: &[usize]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

fn validate_sweep(config: &ExperimentConfig) -> Result<Vec<f64>> {
    let levels = config
        .sweep
        .as_ref()
        .map(|s| s.levels.clone())
        .ok_or_else(|| Error::invalid("sweep.levels", "a [sweep] table is required"))?;
    if levels.len() < 2 {
        return Err(Error::invalid("sweep.levels", "at least two noise levels are required"));
    }
    for (i, a) in levels.iter().enumerate() {
        if levels[..i].contains(a) {
            return Err(Error::invalid("sweep.levels", format!("level {a} repeated")));
        }
    }
    if config.run.seeds.len() < 3 {
        return Err(Error::invalid("run.seeds", "a sweep needs at least three seeds"));
    }
    if config.data.as_ref().is_some_and(|d| d.dir.is_some() || d.file.is_some()) {
        return Err(Error::invalid("data", "a sweep simulates its data; remove data.dir/data.file"));
    }
    Ok(levels)
}

/// Median stop iteration per rule and noise level. Levels are σ for the
/// Gaussian model and expected total counts `Σ Hx̄` for the Poisson model.
/// The same seeds are used at every level.
pub fn cmd_sweep(config: &ExperimentConfig) -> Result<SweepOutput> {
    config.validate()?;
    let levels = validate_sweep(config)?;
    let exp = Experiment::new(config.clone())?;
    let phantom = exp
        .truth
        .as_ref()
        .ok_or_else(|| Error::invalid("phantom", "a sweep needs a phantom"))?;
    let out = config.out_dir();
    create_dir(&out)?;

    let mut jobs = Vec::new();
    for &level in &levels {
        let (noise, truth) = if exp.noise.is_poisson() {
            (NoiseModel::Poisson, scale_to_counts(&exp.op, phantom, level)?)
        } else {
            (NoiseModel::gaussian(level)?, phantom.clone())
        };
        let clean = exp.op.apply(&truth)?;
        for &seed in &config.run.seeds {
            jobs.push((level, noise, seed, clean.clone(), truth.clone()));
        }
    }
    let runs: Vec<Vec<SweepRun>> = jobs
        .par_iter()
        .map(|(level, noise, seed, clean, truth)| {
            let data = simkit::sample_noise(clean, *noise, *seed)?;
            let problem = Problem::new(&exp.op, &data, *noise)?;
            let mut rules = exp.rules_with(&data, *noise, sweep_tau)?;
            for r in rules.iter_mut() {
                if r.criterion() == Criterion::L2Oracle {
                    *r = crate::stopping::StoppingRule::l2_oracle(truth.clone());
                }
            }
            let options = RunOptions::max_iter(config.run.max_iter);
            let run = run_rules(&problem, exp.solver, &mut rules, &options, |_| {})?;
            Ok(rules
                .iter()
                .zip(&run.results)
                .map(|(rule, res)| SweepRun {
                    level: *level,
                    seed: *seed,
                    rule: rule.criterion(),
                    tau: rule.tau(),
                    stop_iteration: res.stop_iteration,
                    stop_reason: res.stop_reason,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let runs: Vec<SweepRun> = runs.into_iter().flatten().collect();

    let mut cells = Vec::new();
    for &level in &levels {
        for &rule in &exp.criteria {
            let here: Vec<&SweepRun> = runs.iter().filter(|r| r.level == level && r.rule == rule).collect();
            let stops: Vec<usize> = here.iter().map(|r| r.stop_iteration).collect();
            cells.push(SweepCell {
                level,
                rule,
                median_stop_iteration: median(&stops),
                fired: here.iter().filter(|r| r.stop_reason == StopReason::RuleFired).count(),
                seeds: here.len(),
            });
        }
    }

    let mut files = Vec::new();
    let table = out.join(SWEEP_TABLE);
    {
        let mut w = io::csv_writer(&table)?;
        w.write_record(["level", "rule", "median_stop_iteration", "fired", "seeds"])?;
        for c in &cells {
            w.write_record([
                io::format_f64(c.level),
                c.rule.to_string(),
                io::format_f64(c.median_stop_iteration),
                c.fired.to_string(),
                c.seeds.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&table, e))?;
    }
    files.push(table);
    let runs_path = out.join(SWEEP_RUNS);
    {
        let mut w = io::csv_writer(&runs_path)?;
        w.write_record(["level", "seed", "rule", "tau", "stop_iteration", "stop_reason"])?;
        for r in &runs {
            w.write_record([
                io::format_f64(r.level),
                r.seed.to_string(),
                r.rule.to_string(),
                io::format_f64(r.tau),
                r.stop_iteration.to_string(),
                r.stop_reason.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&runs_path, e))?;
    }
    files.push(runs_path);
    let manifest = write_manifest(&out, config, "sweep", &files)?;
    files.push(manifest);
    Ok(SweepOutput { cells, runs, files })
}
