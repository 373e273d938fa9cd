use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use cbr_core::cli::commands::{cmd_curves, cmd_reconstruct, seed_dir};
use cbr_core::cli::config::ExperimentConfig;
use cbr_core::cli::{run_from_args, EXIT_CONFIG, EXIT_NEVER_FIRED, EXIT_OK};
use cbr_core::io;
use cbr_core::operators::BlurSpec;
use cbr_core::simkit::{build_ill_posed_instance, build_phantom, IllPosedRecipe, PhantomSpec};
use cbr_core::{Error, StopReason};

const GAUSSIAN: &str = r#"
[operator]
kind = "blur"
rows = 8
cols = 8
psf_sigma = 1.0

[phantom]
rows = 8
cols = 8

[[phantom.source]]
label = "A"
col = 3.5
row = 3.5
variance = 8.0
amplitude = 2.0

[noise]
model = "gaussian"
sigma = 0.01
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn cli(args: &[&str]) -> i32 {
    run_from_args(std::iter::once("cbr").chain(args.iter().copied()))
}

fn with_run(base: &str, run: &str) -> String {
    format!("{base}\n[run]\n{run}\n")
}

#[test]
fn simulate_writes_every_file_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &with_run(GAUSSIAN, "seeds = [1, 2]"));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(cli(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), EXIT_OK);
    }
    for f in ["phantom.csv", "phantom.pgm", "clean.csv", "noisy_seed1.csv", "noisy_seed2.csv"] {
        let (x, y) = (fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        assert!(!x.is_empty(), "{f}");
        assert_eq!(x, y, "{f} differs between runs");
    }
    assert_ne!(fs::read(a.join("noisy_seed1.csv")).unwrap(), fs::read(a.join("noisy_seed2.csv")).unwrap());

    // the manifest is itself a runnable configuration
    let manifest = ExperimentConfig::read(a.join("manifest.toml")).unwrap();
    assert_eq!(manifest.run.seeds, vec![1, 2]);
    let table = manifest.manifest.expect("manifest table");
    assert_eq!(table["command"].as_str(), Some("simulate"));
    let c = tmp.path().join("c");
    let again = write_config(tmp.path(), "again.toml", &fs::read_to_string(a.join("manifest.toml")).unwrap());
    assert_eq!(cli(&["simulate", "--config", again.to_str().unwrap(), "--out", c.to_str().unwrap()]), EXIT_OK);
    assert_eq!(fs::read(a.join("noisy_seed2.csv")).unwrap(), fs::read(c.join("noisy_seed2.csv")).unwrap());
}

#[test]
fn simulate_rejects_a_phantom_without_sources() {
    let tmp = tempfile::tempdir().unwrap();
    let text = GAUSSIAN.split("[[phantom.source]]").next().unwrap().to_string() + "[noise]\nmodel = \"gaussian\"\nsigma = 1.0\n";
    let cfg = write_config(tmp.path(), "c.toml", &text);
    let out = tmp.path().join("out");
    assert_eq!(cli(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), EXIT_CONFIG);
    assert!(!out.join("phantom.csv").exists());
}

#[test]
fn reconstruct_with_cbr_and_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let text = with_run(
        &GAUSSIAN.replace("sigma = 0.01", "sigma = 0.05"),
        &format!("rules = [\"cbr-gaussian\", \"l2-oracle\"]\nseeds = [4]\nout = {:?}", out.to_str().unwrap()),
    );
    let config = ExperimentConfig::from_toml(&text).unwrap();
    let res = cmd_reconstruct(&config).unwrap();
    assert_eq!(res.rows.len(), 2);
    let dir = seed_dir(&out, 4);
    for rule in ["cbr-gaussian", "l2-oracle"] {
        for f in [format!("{rule}.csv"), format!("{rule}.pgm"), format!("trace_{rule}.csv"), format!("photometry_{rule}.csv")] {
            assert!(dir.join(&f).exists(), "missing {f}");
        }
    }
    for f in ["objective.csv", "l2_error.csv", "photometry.csv"] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    assert!(out.join("summary.csv").exists() && out.join("manifest.toml").exists());
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("seed,rule,tau,stop_iteration,stop_reason,objective,l2_error,min_ratio_percent\n"));
    for row in &res.rows {
        let img = io::read_image_csv(dir.join(format!("{}.csv", row.rule))).unwrap();
        assert_eq!(img.shape(), Some((8, 8)));
        assert!(img.as_slice().iter().all(|v| *v >= 0.0));
        assert!(row.l2_error.is_some() && row.photometry.is_some());
    }
    // the stored trace ends at the stop
    let trace = cbr_core::RuleTrace::read_csv(dir.join("trace_cbr-gaussian.csv")).unwrap();
    assert_eq!(trace.len(), res.rows[0].stop_iteration);
}

#[test]
fn a_rule_that_never_fires_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let run = format!("tau = 1e-30\nmax_iter = 20\nout = {:?}", out.to_str().unwrap());
    let config = ExperimentConfig::from_toml(&with_run(GAUSSIAN, &run)).unwrap();
    let res = cmd_reconstruct(&config).unwrap();
    assert_eq!(res.rows[0].stop_reason, StopReason::MaxIterations);
    assert_eq!(res.rows[0].stop_iteration, 20);
    assert!(fs::read_to_string(out.join("summary.csv")).unwrap().contains("MaxIterations"));

    let cfg = write_config(tmp.path(), "c.toml", &with_run(GAUSSIAN, &format!("{run}\nfail_on_no_stop = true")));
    assert_eq!(cli(&["reconstruct", "--config", cfg.to_str().unwrap()]), EXIT_NEVER_FIRED);
    let plain = write_config(tmp.path(), "p.toml", &with_run(GAUSSIAN, &run));
    assert_eq!(cli(&["reconstruct", "--config", plain.to_str().unwrap()]), EXIT_OK);
}

#[test]
fn exact_data_with_tiny_sigma_is_fitted() {
    let tmp = tempfile::tempdir().unwrap();
    let spec: PhantomSpec = ExperimentConfig::from_toml(GAUSSIAN).unwrap().phantom.unwrap();
    let op = BlurSpec::new(8, 8, 1.0).build().unwrap();
    let clean = op.apply(&build_phantom(&spec).unwrap()).unwrap();
    let data = tmp.path().join("clean.csv");
    io::write_data_csv(&data, &clean).unwrap();
    let out = tmp.path().join("out");
    let text = GAUSSIAN.replace("sigma = 0.01", "sigma = 1e-9")
        + &format!("\n[data]\nfile = {:?}\n", data.to_str().unwrap())
        + &format!("\n[run]\ntau = 1.0\nmax_iter = 5000\nout = {:?}\n", out.to_str().unwrap());
    let res = cmd_reconstruct(&ExperimentConfig::from_toml(&text).unwrap()).unwrap();
    let row = &res.rows[0];
    assert!(row.stop_iteration > 100, "stopped at {}", row.stop_iteration);
    assert!(row.objective < 1e-8, "objective {}", row.objective);
}

#[test]
fn curves_for_certified_ill_posed_data() {
    let tmp = tempfile::tempdir().unwrap();
    let op = BlurSpec::new(16, 16, 2.0).gain(1000.0).build().unwrap();
    let phantom = build_phantom(&PhantomSpec::flare_on(16).unwrap()).unwrap();
    let inst = build_ill_posed_instance(&op, &IllPosedRecipe::poisson(phantom), 3).unwrap();
    let data = tmp.path().join("y.csv");
    io::write_data_csv(&data, &inst.data).unwrap();
    let out = tmp.path().join("out");
    let text = format!(
        r#"
[operator]
kind = "blur"
rows = 16
cols = 16
psf_sigma = 2.0
gain = 1000.0

[data]
file = {data:?}

[noise]
model = "poisson"

[run]
rules = ["morozov-poisson", "pearson", "poisson-discrepancy", "cbr-poisson"]
tau = 1.0
max_iter = 2500
full_trace = true
out = {out:?}
"#,
        data = data.to_str().unwrap(),
        out = out.to_str().unwrap()
    );
    let cfg = write_config(tmp.path(), "c.toml", &text);
    let path = cfg.to_str().unwrap();
    assert_eq!(cli(&["reconstruct", "--config", path]), EXIT_OK);
    assert_eq!(cli(&["curves", "--config", path]), EXIT_OK);
    let dir = seed_dir(&out, 1);
    for rule in ["morozov-poisson", "pearson", "poisson-discrepancy"] {
        let text = fs::read_to_string(dir.join(format!("curves_{rule}.csv"))).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("k,lhs,rhs,log10_lhs,log10_rhs,fired,first_fired"));
        let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
        assert_eq!(rows.len(), 2500);
        assert!(rows.iter().all(|r| r[1] > r[2] && r[5] == 0.0 && r[6] == 0.0), "{rule} fired");
    }
    let text = fs::read_to_string(dir.join("curves_cbr-poisson.csv")).unwrap();
    let first: Vec<&str> = text.lines().skip(1).filter(|l| l.ends_with(",1")).collect();
    assert_eq!(first.len(), 1, "CBR first-fired rows: {first:?}");
}

#[test]
fn curves_reject_an_empty_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let dir = seed_dir(&out, 1);
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join("trace_cbr-gaussian.csv"), "k,lhs,rhs,fired\n").unwrap();
    let config = ExperimentConfig::from_toml(&with_run(GAUSSIAN, &format!("out = {:?}", out.to_str().unwrap()))).unwrap();
    assert!(matches!(cmd_curves(&config), Err(Error::EmptyTrace(_))));
}

#[test]
fn sweep_needs_several_levels() {
    let tmp = tempfile::tempdir().unwrap();
    let text = with_run(GAUSSIAN, "seeds = [1, 2, 3]") + "\n[sweep]\nlevels = [0.1]\n";
    let cfg = write_config(tmp.path(), "c.toml", &text);
    let out = tmp.path().join("out");
    assert_eq!(cli(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), EXIT_CONFIG);
    assert!(!out.join("sweep.csv").exists());
}

#[test]
fn command_line_overrides_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", GAUSSIAN);
    let path = cfg.to_str().unwrap();
    let out = tmp.path().join("out");
    let o = out.to_str().unwrap();
    assert_eq!(cli(&["simulate", "--config", path, "--out", o, "--seeds", "0-2"]), EXIT_OK);
    assert!(out.join("noisy_seed2.csv").exists());
    assert_eq!(cli(&["reconstruct", "--config", path, "--rule", "cbr-poisson"]), EXIT_CONFIG);
    assert_eq!(cli(&["reconstruct", "--config", path, "--tau=-1"]), EXIT_CONFIG);
    assert_eq!(cli(&["reconstruct", "--config", path, "--max-iter", "0"]), EXIT_CONFIG);
    assert_eq!(cli(&["reconstruct", "--config", "/nonexistent/c.toml"]), EXIT_CONFIG);
    assert_eq!(cli(&["explode"]), EXIT_CONFIG);
    let bad = write_config(tmp.path(), "bad.toml", &GAUSSIAN.replace("psf_sigma", "psf_sgima"));
    assert_eq!(cli(&["simulate", "--config", bad.to_str().unwrap()]), EXIT_CONFIG);
}

#[test]
fn binary_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &with_run(GAUSSIAN, "max_iter = 50"));
    let out = tmp.path().join("out");
    let bin = env!("CARGO_BIN_EXE_cbr");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap();
    let help = status(&["--help"]);
    assert!(help.status.success());
    assert!(String::from_utf8_lossy(&help.stdout).contains("reconstruct"));
    let sim = status(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    let rec = status(&["reconstruct", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(rec.status.success());
    assert!(String::from_utf8_lossy(&rec.stdout).contains("cbr-gaussian"));
    assert_eq!(status(&["sweep"]).status.code(), Some(EXIT_CONFIG));
}
