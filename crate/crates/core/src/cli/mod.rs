//! Command-line front end: parses flags and an optional TOML file, runs the
//! experiment and writes its reports.

pub mod config;
pub mod experiments;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser};

use crate::error::{Error, Result};
use crate::shiftlab::ShiftKind;

pub use config::{CmMonitor, ExperimentConfig, FileConfig, Subcommand, SEED_ENV};
pub use experiments::{RunOutput, TraceRow, TrialRow};
pub use report::{emit_reports, report_json, OUTCOMES_FILE, REPORT_FILE, TRACES_FILE, TRIALS_FILE};

#[derive(Debug, Parser)]
#[command(
    name = "driftscope",
    version,
    about = "Martingale shift monitors on synthetic episodic streams"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::Subcommand)]
pub enum Command {
    /// Iterations until alert of our monitors and the conformal baselines.
    Detect,
    /// Post-intervention error of correct, wrong, generic and no intervention.
    Intervene,
    /// Crashes of targeted monitoring versus scheduled maintenance.
    Lifecycle,
    /// Which of the input, output and custom monitors alerts first.
    Race,
    /// False alerts on streams without a shift.
    Soundness,
}

impl From<Command> for Subcommand {
    fn from(c: Command) -> Self {
        match c {
            Command::Detect => Subcommand::Detect,
            Command::Intervene => Subcommand::Intervene,
            Command::Lifecycle => Subcommand::Lifecycle,
            Command::Race => Subcommand::Race,
            Command::Soundness => Subcommand::Soundness,
        }
    }
}

/// Flags override the config file, which overrides the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// TOML file with any of the keys below (flags take precedence).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Base seed [default: $DRIFTSCOPE_SEED, else 0].
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Seeded trials per shift [default: 100].
    #[arg(long, global = true, value_name = "N")]
    pub trials: Option<usize>,
    /// Alert threshold C, > 1 [default: 100].
    #[arg(long, global = true, value_name = "C")]
    pub threshold: Option<f64>,
    /// sensor_degradation, environment_shift, brightness_shift or none [default: every shift the experiment uses].
    #[arg(long, global = true, value_name = "KIND", value_parser = parse_shift)]
    pub shift: Option<ShiftKind>,
    /// Mean episodes between shift arrivals (lifecycle, required).
    #[arg(long, global = true, value_name = "N")]
    pub lambda: Option<f64>,
    /// Episodes between scheduled maintenance (lifecycle, required).
    #[arg(long, global = true, value_name = "N")]
    pub gamma: Option<usize>,
    /// Episodes per trial before a silent monitor is censored [default: 200].
    #[arg(long, global = true, value_name = "N")]
    pub max_episodes: Option<usize>,
    /// Episodes per lifecycle [default: 1000].
    #[arg(long, global = true, value_name = "N")]
    pub horizon: Option<usize>,
    /// Output directory [default: results].
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

fn parse_shift(s: &str) -> std::result::Result<ShiftKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Flags {
    fn as_file_config(&self) -> FileConfig {
        FileConfig {
            seed: self.seed,
            trials: self.trials,
            threshold: self.threshold,
            max_episodes: self.max_episodes,
            shift: self.shift,
            lambda: self.lambda,
            gamma: self.gamma,
            horizon: self.horizon,
            out: self.out.clone(),
            taps: None,
            cm: None,
        }
    }
}

/// Resolves the configuration from the file, flags and `env_seed`.
pub fn parse_config(command: Command, flags: &Flags, env_seed: Option<&str>) -> Result<ExperimentConfig> {
    let file = match &flags.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    ExperimentConfig::resolve(command.into(), file.overridden_by(flags.as_file_config()), env_seed)
}

/// Runs the experiment and writes its files. Completed trials are written
/// even when some fail; `report.json` then records `"complete": false` and
/// an error is returned.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let out = experiments::run(cfg)?;
    let written = emit_reports(cfg, &out)?;
    if let Some((_, message)) = out.failed.first() {
        return Err(Error::TrialsFailed {
            failed: out.failed.iter().map(|f| f.0).collect(),
            message: message.clone(),
        });
    }
    Ok(written)
}

/// Entry point behind `main`.
pub fn main_with(cli: Cli) -> Result<Vec<PathBuf>> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = parse_config(cli.command, &cli.flags, env_seed.as_deref())?;
    run_experiment(&cfg)
}
