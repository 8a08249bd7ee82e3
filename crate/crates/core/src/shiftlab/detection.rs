//! Detection trials, monitor races and sensitive-tap selection.

use serde::{Deserialize, Serialize};

use crate::conformal::ScoreKind;
use crate::domain::{representative_sample, Sample, TapId};
use crate::error::{Error, Result};
use crate::pipeline::Pipeline;
use crate::rng::Rng;

use super::shift::{Ramp, ShiftKind};
use super::system::{FeatureSource, LabConfig, MonitorBank, MonitorSpec, System};

const SYSTEM_STREAM: u64 = 11;
const BANK_STREAM: u64 = 12;
const PROBE_STREAM: u64 = 13;

/// Minimum number of probe samples for [`select_sensitive_tap`].
pub const MIN_PROBES: usize = 10;

/// What one monitor did in one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorRecord {
    pub name: String,
    /// Episode index of the first alert.
    pub first_alert: Option<usize>,
    pub final_m: f64,
    pub trace: Vec<f64>,
}

impl MonitorRecord {
    /// Number of updates up to and including the alerting one.
    pub fn iterations(&self) -> Option<usize> {
        self.first_alert.map(|j| j + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub shift: ShiftKind,
    pub monitors: Vec<MonitorRecord>,
}

impl TrialResult {
    pub fn get(&self, name: &str) -> Option<&MonitorRecord> {
        self.monitors.iter().find(|m| m.name == name)
    }
}

/// Our monitor on the first three taps plus both conformal baselines.
pub fn detection_monitors() -> Vec<MonitorSpec> {
    vec![
        MonitorSpec::martingale("ours_tap0", FeatureSource::Control(TapId(0))),
        MonitorSpec::martingale("ours_tap1", FeatureSource::Control(TapId(1))),
        MonitorSpec::martingale("ours_tap2", FeatureSource::Control(TapId(2))),
        MonitorSpec::conformal(
            "cm_nearest_tap0",
            FeatureSource::Control(TapId(0)),
            ScoreKind::NearestDistance,
        ),
        MonitorSpec::conformal("cm_ratio_tap2", FeatureSource::Control(TapId(2)), ScoreKind::Ratio),
    ]
}

/// Name of the monitor of ours expected to catch `shift` first.
pub fn designated_monitor(shift: ShiftKind) -> &'static str {
    match shift {
        ShiftKind::SensorDegradation => "ours_tap0",
        ShiftKind::EnvironmentShift => "ours_tap2",
        ShiftKind::BrightnessShift | ShiftKind::None => "ours_tap0",
    }
}

/// Runs monitors on a stream that is shifted from episode 0, until every
/// monitor has alerted or `max_episodes` have been processed.
pub fn run_detection_trial(
    config: &LabConfig,
    specs: &[MonitorSpec],
    shift: ShiftKind,
    max_episodes: usize,
    streams: &Rng,
) -> Result<TrialResult> {
    let mut system = System::build(config.clone(), Ramp::GENTLE, streams.substream(&[SYSTEM_STREAM]))?;
    let bank = MonitorBank::new(specs.to_vec(), &system, streams.substream(&[BANK_STREAM]))?;
    system.begin_shift(shift, 0);
    run_stream(&mut system, bank, shift, max_episodes)
}

fn run_stream(
    system: &mut System,
    mut bank: MonitorBank,
    shift: ShiftKind,
    max_episodes: usize,
) -> Result<TrialResult> {
    for j in 0..max_episodes {
        let episode = system.next_episode(j)?;
        bank.observe(system, &episode, j)?;
        if bank.all_alerted() {
            break;
        }
    }
    let values = bank.values();
    let monitors = bank
        .specs()
        .iter()
        .enumerate()
        .map(|(i, spec)| MonitorRecord {
            name: spec.name.clone(),
            first_alert: bank.first_alerts()[i],
            final_m: values[i],
            trace: bank.traces()[i].clone(),
        })
        .collect();
    Ok(TrialResult { shift, monitors })
}

/// Picks the candidate tap whose features move most under `perturb`,
/// relative to their spread on the probes:
/// `mean ‖f(perturb(x)) − f(x)‖ / mean per-coordinate sd of f(x)`.
/// Taps with zero spread score 0. Ties go to the smaller tap.
pub fn select_sensitive_tap<F>(
    pipeline: &Pipeline,
    perturb: F,
    probes: &[Sample],
    candidates: &[TapId],
) -> Result<TapId>
where
    F: Fn(&Sample) -> Result<Sample>,
{
    if candidates.is_empty() {
        return Err(Error::InvalidParameter("no candidate taps".into()));
    }
    if probes.len() < MIN_PROBES {
        return Err(Error::InvalidParameter(format!(
            "need at least {MIN_PROBES} probe samples, got {}",
            probes.len()
        )));
    }
    let perturbed = probes.iter().map(&perturb).collect::<Result<Vec<_>>>()?;
    let mut best = (candidates[0], f64::NEG_INFINITY);
    for &tap in candidates {
        let base = probes
            .iter()
            .map(|s| pipeline.tap_features(s, tap))
            .collect::<Result<Vec<_>>>()?;
        let moved = perturbed
            .iter()
            .map(|s| pipeline.tap_features(s, tap))
            .collect::<Result<Vec<_>>>()?;
        let shift = base
            .iter()
            .zip(&moved)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (y - x).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / probes.len() as f64;
        let spread = mean_sd(&base);
        let score = if spread > 0.0 {
            shift / spread
        } else {
            tracing::warn!(%tap, "tap has no spread on the probes; scoring it 0");
            0.0
        };
        if score > best.1 || (score == best.1 && tap < best.0) {
            best = (tap, score);
        }
    }
    Ok(best.0)
}

fn mean_sd(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len() as f64;
    let dim = rows[0].len();
    let total: f64 = (0..dim)
        .map(|c| {
            let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n;
            (rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .sum();
    total / dim as f64
}

/// Probe-network tap most sensitive to brightness scaling, measured on one
/// representative sample per reference episode.
pub fn brightness_tap(system: &System, streams: &Rng) -> Result<TapId> {
    let mut rng = streams.substream(&[PROBE_STREAM]);
    let probes = system
        .reference()
        .episodes()
        .iter()
        .map(|e| representative_sample(e, &mut rng).cloned())
        .collect::<Result<Vec<_>>>()?;
    let beta = system.shift().brightness_beta;
    let candidates: Vec<TapId> = (1..=system.probe().stages()).map(TapId).collect();
    select_sensitive_tap(system.probe(), |s| s.map(|_, v| beta * v), &probes, &candidates)
}

/// Outcome of one race between the input, output and custom monitors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceResult {
    pub trial: TrialResult,
    pub custom_tap: TapId,
    pub designated: String,
}

impl RaceResult {
    /// The designated monitor alerted, and no other monitor alerted strictly
    /// earlier.
    pub fn first_correct(&self) -> bool {
        let Some(mine) = self.trial.get(&self.designated).and_then(|m| m.first_alert) else {
            return false;
        };
        self.trial
            .monitors
            .iter()
            .filter(|m| m.name != self.designated)
            .all(|m| m.first_alert.is_none_or(|j| mine <= j))
    }
}

pub const RACE_INPUT: &str = "input";
pub const RACE_OUTPUT: &str = "output";
pub const RACE_CUSTOM: &str = "custom";

/// Monitor expected to win the race for `shift`.
pub fn race_designated(shift: ShiftKind) -> &'static str {
    match shift {
        ShiftKind::SensorDegradation | ShiftKind::None => RACE_INPUT,
        ShiftKind::EnvironmentShift => RACE_OUTPUT,
        ShiftKind::BrightnessShift => RACE_CUSTOM,
    }
}

/// Races the input-tap, output-tap and custom brightness monitors.
pub fn run_monitor_race(
    config: &LabConfig,
    shift: ShiftKind,
    max_episodes: usize,
    streams: &Rng,
) -> Result<RaceResult> {
    let mut system = System::build(config.clone(), Ramp::GENTLE, streams.substream(&[SYSTEM_STREAM]))?;
    let custom_tap = brightness_tap(&system, streams)?;
    let specs = vec![
        MonitorSpec::martingale(RACE_INPUT, FeatureSource::Control(TapId(0))),
        MonitorSpec::martingale(RACE_OUTPUT, FeatureSource::Control(system.pipeline().prediction_tap())),
        MonitorSpec::martingale(RACE_CUSTOM, FeatureSource::Probe(custom_tap)),
    ];
    let bank = MonitorBank::new(specs, &system, streams.substream(&[BANK_STREAM]))?;
    system.begin_shift(shift, 0);
    let trial = run_stream(&mut system, bank, shift, max_episodes)?;
    Ok(RaceResult {
        trial,
        custom_tap,
        designated: race_designated(shift).to_string(),
    })
}
