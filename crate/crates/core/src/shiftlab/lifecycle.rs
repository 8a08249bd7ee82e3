//! Long-horizon deployment with randomly arriving shifts, comparing
//! monitor-triggered interventions against fixed-cadence maintenance.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::{Alert, TapId};
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::shift::{schedule_shifts, Ramp, ShiftKind};
use super::system::{FeatureSource, InterventionKind, LabConfig, MonitorBank, MonitorSpec, System};

const SYSTEM_STREAM: u64 = 31;
const BANK_STREAM: u64 = 32;
const SCHEDULE_STREAM: u64 = 33;

/// Nominal episodes used for the pre-shift error.
pub const PRE_SHIFT_EPISODES: usize = 100;

/// Monitors restart whenever `M` drops below 1, scaling the classifier
/// weights by this factor each time.
pub const RESTART_SHRINK: f64 = 0.7;

pub const INPUT_MONITOR: &str = "input";
pub const OUTPUT_MONITOR: &str = "output";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Replace the sensor on an input alert, retrain on an output alert.
    TargetedMonitoring,
    /// Apply every intervention each `gamma` episodes.
    ScheduledMaintenance,
}

impl Policy {
    pub const ALL: [Policy; 2] = [Policy::TargetedMonitoring, Policy::ScheduledMaintenance];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::TargetedMonitoring => "targeted_monitoring",
            Policy::ScheduledMaintenance => "scheduled_maintenance",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifecycleConfig {
    pub horizon: usize,
    pub lambda: f64,
    pub gamma: usize,
    pub crash_horizon: usize,
    pub policy: Policy,
    pub lab: LabConfig,
}

impl Default for LifecycleConfig {
    fn default() -> Self {
        Self {
            horizon: 1000,
            lambda: 100.0,
            gamma: 100,
            crash_horizon: 45,
            policy: Policy::TargetedMonitoring,
            lab: LabConfig::default(),
        }
    }
}

impl LifecycleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.horizon == 0 {
            return bad("horizon must be > 0");
        }
        if !(self.lambda > 0.0) {
            return bad("lambda must be > 0");
        }
        if self.gamma == 0 {
            return bad("gamma must be > 0");
        }
        if self.crash_horizon == 0 {
            return bad("crash_horizon must be > 0");
        }
        self.lab.env.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifecycleReport {
    pub policy: Policy,
    pub crashes: usize,
    /// Arrivals that started a shift (a repeat of an active kind does not).
    pub shift_arrivals: usize,
    pub mse_pre_shift: f64,
    pub mse_lifecycle: f64,
    pub alerts: Vec<Alert>,
    pub interventions_applied: Vec<(usize, InterventionKind)>,
    /// Monitor names and `M` after every episode (targeted policy only).
    pub monitors: Vec<String>,
    pub traces: Vec<Vec<f64>>,
}

/// Simulates one deployment. Both policies see the same shift schedule and
/// the same episodes for the same `streams`.
pub fn run_lifecycle(cfg: &LifecycleConfig, streams: &Rng) -> Result<LifecycleReport> {
    cfg.validate()?;
    let schedule = schedule_shifts(cfg.horizon, cfg.lambda, &mut streams.substream(&[SCHEDULE_STREAM]));
    run_lifecycle_with_schedule(cfg, &schedule, streams)
}

/// [`run_lifecycle`] with a given arrival list of `(episode, kind)`, sorted
/// by episode.
pub fn run_lifecycle_with_schedule(
    cfg: &LifecycleConfig,
    schedule: &[(usize, ShiftKind)],
    streams: &Rng,
) -> Result<LifecycleReport> {
    cfg.validate()?;
    if schedule.windows(2).any(|w| w[0].0 > w[1].0) {
        return Err(Error::Config("shift schedule must be sorted by episode".into()));
    }
    let mut lab = cfg.lab.clone();
    lab.monitor.restart_below_one = true;
    lab.monitor.restart_shrink = RESTART_SHRINK;
    let mut system = System::build(lab, Ramp::AGGRESSIVE, streams.substream(&[SYSTEM_STREAM]))?
        .with_history_cap(super::system::RETRAIN_WINDOW);

    let mut held_out = system.clone();
    let mut pre = 0.0;
    for i in 0..PRE_SHIFT_EPISODES {
        let e = held_out.next_episode(cfg.horizon + i)?;
        pre += held_out.pipeline().episode_mse(&e)?;
    }

    let targeted = cfg.policy == Policy::TargetedMonitoring;
    let mut bank = if targeted {
        let specs = vec![
            MonitorSpec::martingale(INPUT_MONITOR, FeatureSource::Control(TapId(0))),
            MonitorSpec::martingale(
                OUTPUT_MONITOR,
                FeatureSource::Control(system.pipeline().prediction_tap()),
            ),
        ];
        Some(MonitorBank::new(specs, &system, streams.substream(&[BANK_STREAM]))?)
    } else {
        None
    };

    let mut report = LifecycleReport {
        policy: cfg.policy,
        crashes: 0,
        shift_arrivals: 0,
        mse_pre_shift: pre / PRE_SHIFT_EPISODES as f64,
        mse_lifecycle: 0.0,
        alerts: Vec::new(),
        interventions_applied: Vec::new(),
        monitors: bank
            .as_ref()
            .map(|b| b.specs().iter().map(|s| s.name.clone()).collect())
            .unwrap_or_default(),
        traces: Vec::new(),
    };
    let mut arrivals = schedule.iter().copied().peekable();
    let mut total_mse = 0.0;

    for j in 0..cfg.horizon {
        if !targeted && j > 0 && j % cfg.gamma == 0 {
            system.apply_intervention(InterventionKind::All)?;
            report.interventions_applied.push((j, InterventionKind::All));
        }

        for (kind, onset) in system.shift().active() {
            if j - onset >= cfg.crash_horizon {
                tracing::debug!(episode = j, %kind, "crash");
                system.clear_shift(kind);
                report.crashes += 1;
            }
        }

        while let Some(&(at, kind)) = arrivals.peek() {
            if at > j {
                break;
            }
            arrivals.next();
            if system.begin_shift(kind, j) {
                report.shift_arrivals += 1;
            }
        }

        let episode = system.next_episode(j)?;
        total_mse += system.pipeline().episode_mse(&episode)?;

        if let Some(b) = bank.as_mut() {
            let fresh = b.observe(&mut system, &episode, j)?;
            let mut actions = Vec::new();
            let mut alerted = Vec::new();
            for (i, &hit) in fresh.iter().enumerate() {
                if !hit {
                    continue;
                }
                let spec = &b.specs()[i];
                report.alerts.push(Alert {
                    tap: spec.source.tap(),
                    monitor_name: spec.name.clone(),
                    episode_index: j,
                    martingale_value: b.traces()[i][b.traces()[i].len() - 1],
                });
                alerted.push(i);
                actions.push(if spec.name == INPUT_MONITOR {
                    InterventionKind::ReplaceSensor
                } else {
                    InterventionKind::WeightedRetrain
                });
            }
            // A new sensor leaves the pipeline and the nominal regime alone,
            // so only the monitors that fired restart; a retrain invalidates
            // every reference pool.
            let retrained = actions.contains(&InterventionKind::WeightedRetrain);
            for &kind in &actions {
                system.apply_intervention(kind)?;
                report.interventions_applied.push((j, kind));
            }
            if retrained {
                b.reset(&mut system)?;
            } else {
                b.reset_some(&mut system, &alerted)?;
            }
        }
    }

    report.mse_lifecycle = total_mse / cfg.horizon as f64;
    if let Some(b) = bank {
        report.traces = b.traces().to_vec();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(policy: Policy) -> LifecycleConfig {
        LifecycleConfig {
            horizon: 150,
            lambda: 1e9,
            gamma: 100,
            policy,
            lab: LabConfig {
                reference_episodes: 60,
                ..LabConfig::default()
            },
            ..LifecycleConfig::default()
        }
    }

    #[test]
    fn validation() {
        let c = LifecycleConfig {
            gamma: 0,
            ..LifecycleConfig::default()
        };
        assert!(c.validate().is_err());
        let c = LifecycleConfig {
            lambda: 0.0,
            ..LifecycleConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn quiet_world_has_no_crashes() {
        for policy in Policy::ALL {
            let r = run_lifecycle(&small(policy), &Rng::new(2)).unwrap();
            assert_eq!((r.crashes, r.shift_arrivals), (0, 0));
        }
    }

    #[test]
    fn scheduled_policy_logs_maintenance() {
        let r = run_lifecycle(&small(Policy::ScheduledMaintenance), &Rng::new(3)).unwrap();
        assert_eq!(r.interventions_applied, vec![(100, InterventionKind::All)]);
        assert!(r.alerts.is_empty());
        assert!(r.traces.is_empty());
    }

    #[test]
    fn targeted_policy_traces_every_episode() {
        let r = run_lifecycle(&small(Policy::TargetedMonitoring), &Rng::new(4)).unwrap();
        assert_eq!(r.traces.len(), 2);
        assert!(r.traces.iter().all(|t| t.len() == 150));
    }

    #[test]
    fn shift_just_after_maintenance_crashes() {
        let cfg = LifecycleConfig {
            horizon: 160,
            ..small(Policy::ScheduledMaintenance)
        };
        for kind in [ShiftKind::SensorDegradation, ShiftKind::EnvironmentShift] {
            let r = run_lifecycle_with_schedule(&cfg, &[(101, kind)], &Rng::new(5)).unwrap();
            assert_eq!(r.crashes, 1, "{kind}");
        }
    }

    #[test]
    fn unsorted_schedule_is_rejected() {
        let s = [(50, ShiftKind::SensorDegradation), (10, ShiftKind::EnvironmentShift)];
        assert!(run_lifecycle_with_schedule(&small(Policy::ScheduledMaintenance), &s, &Rng::new(6)).is_err());
    }
}
