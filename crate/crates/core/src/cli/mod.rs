//! Command-line front end: `simulate`, `reconstruct`, `curves`, `sweep`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime or numerical
//! error, 4 a rule never fired and `run.fail_on_no_stop` is set.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_curves, cmd_reconstruct, cmd_simulate, cmd_sweep};
pub use config::{Experiment, ExperimentConfig, TauConfig};

use crate::error::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_NEVER_FIRED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "cbr", version, about = "Nonnegative ML reconstruction with statistical stopping rules")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the phantom, clean data and one noisy data file per seed.
    Simulate(CommonArgs),
    /// Reconstruct each seed and stop with each configured rule.
    Reconstruct(CommonArgs),
    /// Convert the traces of a finished reconstruction into plotting curves.
    Curves(CommonArgs),
    /// Median stop iteration per rule across noise levels.
    Sweep(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds; `a-b` denotes an inclusive range.
    #[arg(long, value_name = "LIST", value_parser = parse_seeds)]
    pub seeds: Option<SeedList>,
    #[arg(long, value_name = "N")]
    pub max_iter: Option<usize>,
    #[arg(long, value_name = "NAME[,NAME...]", value_delimiter = ',')]
    pub rule: Option<Vec<String>>,
    /// A positive number or `default`.
    #[arg(long, value_name = "VALUE|default")]
    pub tau: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

pub fn parse_seeds(text: &str) -> std::result::Result<SeedList, String> {
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let num = |s: &str| s.trim().parse::<u64>().map_err(|_| format!("`{s}` is not a seed"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(format!("empty range `{part}`"));
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(num(part)?),
        }
    }
    if seeds.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(SeedList(seeds))
}

impl CommonArgs {
    /// Reads the config file and applies the command-line overrides.
    pub fn load(&self) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(&self.config).map_err(|e| Error::io(&self.config, e))?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::invalid("config", format!("{}: {e}", self.config.display())))?;
        if let Some(out) = &self.out {
            config.run.out = Some(out.clone());
        }
        if let Some(seeds) = &self.seeds {
            config.run.seeds = seeds.0.clone();
        }
        if let Some(n) = self.max_iter {
            config.run.max_iter = n;
        }
        if let Some(rules) = &self.rule {
            config.run.rules = rules.clone();
        }
        if let Some(tau) = &self.tau {
            config.run.tau = tau.parse()?;
        }
        config.validate()?;
        Ok(config)
    }
}

pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::InvalidParameter { .. }
        | Error::IncompatibleRule { .. }
        | Error::IncompatibleSolver { .. }
        | Error::Parse { .. }
        | Error::MissingShape
        | Error::DimensionMismatch { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Runs one parsed command and returns its exit code, reporting to stdout
/// and stderr.
pub fn execute(cli: Cli) -> i32 {
    let (args, name) = match &cli.command {
        Command::Simulate(a) => (a, "simulate"),
        Command::Reconstruct(a) => (a, "reconstruct"),
        Command::Curves(a) => (a, "curves"),
        Command::Sweep(a) => (a, "sweep"),
    };
    let config = match args.load() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("cbr {name}: configuration error: {e}");
            return EXIT_CONFIG;
        }
    };
    let result: Result<i32> = match cli.command {
        Command::Simulate(_) => cmd_simulate(&config).map(|o| {
            println!("wrote {} files and {}", o.files.len(), o.manifest.display());
            EXIT_OK
        }),
        Command::Reconstruct(_) => cmd_reconstruct(&config).map(|o| {
            for r in &o.rows {
                println!("seed {} {}: k = {} ({})", r.seed, r.rule, r.stop_iteration, r.stop_reason);
            }
            if config.run.fail_on_no_stop && o.never_fired().next().is_some() {
                eprintln!("cbr reconstruct: at least one rule never fired");
                EXIT_NEVER_FIRED
            } else {
                EXIT_OK
            }
        }),
        Command::Curves(_) => cmd_curves(&config).map(|o| {
            println!("wrote {} curve files", o.files.len());
            EXIT_OK
        }),
        Command::Sweep(_) => cmd_sweep(&config).map(|o| {
            for c in &o.cells {
                println!(
                    "level {} {}: median k = {} ({}/{} fired)",
                    c.level, c.rule, c.median_stop_iteration, c.fired, c.seeds
                );
            }
            if config.run.fail_on_no_stop && o.runs.iter().any(|r| r.stop_reason == crate::StopReason::MaxIterations) {
                EXIT_NEVER_FIRED
            } else {
                EXIT_OK
            }
        }),
    };
    result.unwrap_or_else(|e| {
        eprintln!("cbr {name}: {e}");
        exit_code(&e)
    })
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("1,2,5").unwrap().0, vec![1, 2, 5]);
        assert_eq!(parse_seeds("0-3,9").unwrap().0, vec![0, 1, 2, 3, 9]);
        assert!(parse_seeds("3-1").is_err());
        assert!(parse_seeds("x").is_err());
        assert!(parse_seeds("").is_err());
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "cbr", "reconstruct", "--config", "c.toml", "--rule", "cbr-poisson,l2-oracle", "--tau", "default",
            "--max-iter", "10", "--seeds", "1-3",
        ])
        .unwrap();
        let Command::Reconstruct(a) = cli.command else { panic!() };
        assert_eq!(a.rule.unwrap(), ["cbr-poisson", "l2-oracle"]);
        assert_eq!(a.seeds.unwrap().0, [1, 2, 3]);
        assert_eq!(a.max_iter, Some(10));
    }

    #[test]
    fn missing_config_is_a_config_error() {
        assert_eq!(
            run_from_args(["cbr", "simulate", "--config", "/nonexistent/c.toml"]),
            EXIT_CONFIG
        );
        assert_eq!(run_from_args(["cbr", "bogus"]), EXIT_CONFIG);
    }
}
