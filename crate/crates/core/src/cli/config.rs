//! Experiment configuration: TOML file, command-line flags and defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conformal::ScoreKind;
use crate::error::{Error, Result};
use crate::shiftlab::ShiftKind;

pub const DEFAULT_THRESHOLD: f64 = 100.0;
pub const DEFAULT_TRIALS: usize = 100;
pub const DEFAULT_MAX_EPISODES: usize = 200;
pub const DEFAULT_HORIZON: usize = 1000;
pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_OUT: &str = "results";
pub const SEED_ENV: &str = "DRIFTSCOPE_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subcommand {
    Detect,
    Intervene,
    Lifecycle,
    Race,
    Soundness,
}

impl Subcommand {
    pub const ALL: [Subcommand; 5] = [
        Subcommand::Detect,
        Subcommand::Intervene,
        Subcommand::Lifecycle,
        Subcommand::Race,
        Subcommand::Soundness,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Subcommand::Detect => "detect",
            Subcommand::Intervene => "intervene",
            Subcommand::Lifecycle => "lifecycle",
            Subcommand::Race => "race",
            Subcommand::Soundness => "soundness",
        }
    }

    /// Shifts run when none is configured.
    fn default_shifts(self) -> Vec<ShiftKind> {
        match self {
            Subcommand::Detect | Subcommand::Intervene => {
                vec![ShiftKind::SensorDegradation, ShiftKind::EnvironmentShift]
            }
            Subcommand::Race => vec![
                ShiftKind::SensorDegradation,
                ShiftKind::EnvironmentShift,
                ShiftKind::BrightnessShift,
            ],
            Subcommand::Soundness => vec![ShiftKind::None],
            Subcommand::Lifecycle => Vec::new(),
        }
    }
}

impl fmt::Display for Subcommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subcommand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown subcommand `{s}`")))
    }
}

/// A conformal baseline in the monitor set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmMonitor {
    pub score: ScoreKind,
    pub tap: usize,
}

/// Keys accepted in a config file. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub threshold: Option<f64>,
    pub max_episodes: Option<usize>,
    pub shift: Option<ShiftKind>,
    pub lambda: Option<f64>,
    pub gamma: Option<usize>,
    pub horizon: Option<usize>,
    pub out: Option<PathBuf>,
    /// Taps watched by our monitor in `detect` and `soundness`.
    pub taps: Option<Vec<usize>>,
    /// Conformal baselines in `detect` and `soundness`.
    pub cm: Option<Vec<CmMonitor>>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Fields set in `over` replace those in `self`.
    pub fn overridden_by(self, over: FileConfig) -> Self {
        Self {
            seed: over.seed.or(self.seed),
            trials: over.trials.or(self.trials),
            threshold: over.threshold.or(self.threshold),
            max_episodes: over.max_episodes.or(self.max_episodes),
            shift: over.shift.or(self.shift),
            lambda: over.lambda.or(self.lambda),
            gamma: over.gamma.or(self.gamma),
            horizon: over.horizon.or(self.horizon),
            out: over.out.or(self.out),
            taps: over.taps.or(self.taps),
            cm: over.cm.or(self.cm),
        }
    }
}

/// A validated experiment with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub subcommand: Subcommand,
    pub seed: u64,
    pub trials: usize,
    pub threshold: f64,
    pub max_episodes: usize,
    pub shifts: Vec<ShiftKind>,
    pub lambda: Option<f64>,
    pub gamma: Option<usize>,
    pub horizon: usize,
    pub taps: Vec<usize>,
    pub cm: Vec<CmMonitor>,
    /// Not echoed, so the same experiment written elsewhere stays identical.
    #[serde(skip)]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Fills defaults and validates. `env_seed` is the seed fallback used
    /// when neither the file nor a flag sets one.
    pub fn resolve(subcommand: Subcommand, file: FileConfig, env_seed: Option<&str>) -> Result<Self> {
        let seed = match (file.seed, env_seed) {
            (Some(s), _) => s,
            (None, Some(v)) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be a non-negative integer, got `{v}`")))?,
            (None, None) => DEFAULT_SEED,
        };
        let trials = file.trials.unwrap_or(DEFAULT_TRIALS);
        if trials < 1 {
            return Err(Error::Config("trials must be ≥ 1".into()));
        }
        let threshold = file.threshold.unwrap_or(DEFAULT_THRESHOLD);
        if !(threshold.is_finite() && threshold > 1.0) {
            return Err(Error::Config(format!("threshold must be > 1, got {threshold}")));
        }
        let max_episodes = file.max_episodes.unwrap_or(DEFAULT_MAX_EPISODES);
        if max_episodes < 1 {
            return Err(Error::Config("max_episodes must be ≥ 1".into()));
        }
        let horizon = file.horizon.unwrap_or(DEFAULT_HORIZON);
        if horizon < 1 {
            return Err(Error::Config("horizon must be ≥ 1".into()));
        }

        let shifts = match (subcommand, file.shift) {
            (Subcommand::Lifecycle, Some(_)) => {
                return Err(Error::Config(
                    "lifecycle draws its own shifts; `shift` is not accepted".into(),
                ))
            }
            (Subcommand::Soundness, Some(s)) if s != ShiftKind::None => {
                return Err(Error::Config(
                    "soundness runs without a shift; `shift` must be `none`".into(),
                ))
            }
            (_, Some(s)) => vec![s],
            (c, None) => c.default_shifts(),
        };

        let (lambda, gamma) = if subcommand == Subcommand::Lifecycle {
            let lambda = file
                .lambda
                .ok_or_else(|| Error::Config("missing required field `lambda` for lifecycle".into()))?;
            let gamma = file
                .gamma
                .ok_or_else(|| Error::Config("missing required field `gamma` for lifecycle".into()))?;
            if !(lambda.is_finite() && lambda > 0.0) {
                return Err(Error::Config(format!("lambda must be > 0, got {lambda}")));
            }
            if gamma < 1 {
                return Err(Error::Config("gamma must be ≥ 1".into()));
            }
            (Some(lambda), Some(gamma))
        } else {
            (file.lambda, file.gamma)
        };

        let taps = file.taps.unwrap_or_else(|| vec![0, 1, 2]);
        let cm = file.cm.unwrap_or_else(|| {
            vec![
                CmMonitor {
                    score: ScoreKind::NearestDistance,
                    tap: 0,
                },
                CmMonitor {
                    score: ScoreKind::Ratio,
                    tap: 2,
                },
            ]
        });
        if matches!(subcommand, Subcommand::Detect | Subcommand::Soundness) && taps.is_empty() && cm.is_empty() {
            return Err(Error::Config("the monitor set is empty".into()));
        }

        Ok(Self {
            subcommand,
            seed,
            trials,
            threshold,
            max_episodes,
            shifts,
            lambda,
            gamma,
            horizon,
            taps,
            cm,
            output_dir: file.out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gets_defaults() {
        let c = ExperimentConfig::resolve(Subcommand::Detect, FileConfig::parse("").unwrap(), None).unwrap();
        assert_eq!(c.threshold, 100.0);
        assert_eq!(c.trials, 100);
        assert_eq!(c.max_episodes, 200);
        assert_eq!(c.seed, DEFAULT_SEED);
        assert_eq!(
            c.shifts,
            vec![ShiftKind::SensorDegradation, ShiftKind::EnvironmentShift]
        );
    }

    #[test]
    fn flags_override_file() {
        let file = FileConfig::parse("threshold = 100.0\ntrials = 7").unwrap();
        let flags = FileConfig {
            threshold: Some(50.0),
            ..FileConfig::default()
        };
        let c = ExperimentConfig::resolve(Subcommand::Detect, file.overridden_by(flags), None).unwrap();
        assert_eq!(c.threshold, 50.0);
        assert_eq!(c.trials, 7);
    }

    #[test]
    fn zero_trials_rejected() {
        let err =
            ExperimentConfig::resolve(Subcommand::Detect, FileConfig::parse("trials = 0").unwrap(), None).unwrap_err();
        assert!(err.to_string().contains("trials must be ≥ 1"), "{err}");
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = FileConfig::parse("seed = 1\ntrails = 3").unwrap_err().to_string();
        assert!(err.contains("trails"), "{err}");
        for key in ["seed", "trials", "threshold", "lambda", "gamma", "out"] {
            assert!(err.contains(key), "{err}");
        }
    }

    #[test]
    fn malformed_value_reports_line() {
        let err = FileConfig::parse("seed = 1\n\nthreshold = \"high\"")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn lifecycle_requires_lambda_and_gamma() {
        let err = ExperimentConfig::resolve(Subcommand::Lifecycle, FileConfig::parse("gamma = 100").unwrap(), None)
            .unwrap_err();
        assert!(err.to_string().contains("`lambda`"), "{err}");
        let err = ExperimentConfig::resolve(
            Subcommand::Lifecycle,
            FileConfig::parse("lambda = 100.0").unwrap(),
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("`gamma`"), "{err}");
        let ok = ExperimentConfig::resolve(
            Subcommand::Lifecycle,
            FileConfig::parse("lambda = 100.0\ngamma = 100").unwrap(),
            None,
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn seed_precedence() {
        let c = ExperimentConfig::resolve(Subcommand::Race, FileConfig::default(), Some("42")).unwrap();
        assert_eq!(c.seed, 42);
        let c =
            ExperimentConfig::resolve(Subcommand::Race, FileConfig::parse("seed = 3").unwrap(), Some("42")).unwrap();
        assert_eq!(c.seed, 3);
        assert!(ExperimentConfig::resolve(Subcommand::Race, FileConfig::default(), Some("x")).is_err());
    }

    #[test]
    fn bad_threshold_and_shift() {
        let file = FileConfig::parse("threshold = 1.0").unwrap();
        assert!(ExperimentConfig::resolve(Subcommand::Detect, file, None).is_err());
        let file = FileConfig::parse("shift = \"sensor_degradation\"").unwrap();
        assert!(ExperimentConfig::resolve(Subcommand::Soundness, file, None).is_err());
    }

    #[test]
    fn monitor_set_from_file() {
        let text = "taps = [0]\n[[cm]]\nscore = \"ratio\"\ntap = 1\n";
        let c = ExperimentConfig::resolve(Subcommand::Detect, FileConfig::parse(text).unwrap(), None).unwrap();
        assert_eq!(c.taps, vec![0]);
        assert_eq!(
            c.cm,
            vec![CmMonitor {
                score: ScoreKind::Ratio,
                tap: 1
            }]
        );
    }

    #[test]
    fn nearest_score_uses_monitor_spelling() {
        for name in ["nearest", "nearest_distance"] {
            let text = format!("cm = [{{ score = \"{name}\", tap = 2 }}]");
            let c = FileConfig::parse(&text).unwrap();
            assert_eq!(c.cm.unwrap()[0].score, ScoreKind::NearestDistance);
        }
    }
}
