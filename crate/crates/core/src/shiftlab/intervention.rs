//! Intervention trials: detect a shift, then compare what each response
//! does to the control error over the following episodes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::domain::TapId;
use crate::error::Result;
use crate::rng::Rng;

use super::detection::{MonitorRecord, TrialResult};
use super::shift::{Ramp, ShiftKind};
use super::system::{FeatureSource, InterventionKind, LabConfig, MonitorBank, MonitorSpec, System};

/// Nominal episodes before the shift starts.
pub const PRE_SHIFT_EPISODES: usize = 20;
/// Episodes averaged after the intervention.
pub const MSE_WINDOW: usize = 100;

const SYSTEM_STREAM: u64 = 21;
const BANK_STREAM: u64 = 22;

pub const INPUT_MONITOR: &str = "input";
pub const OUTPUT_MONITOR: &str = "output";

/// Response compared in an intervention trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Correct,
    Wrong,
    Generic,
    None,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Correct, Arm::Wrong, Arm::Generic, Arm::None];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Correct => "correct",
            Arm::Wrong => "wrong",
            Arm::Generic => "generic",
            Arm::None => "none",
        }
    }

    pub fn intervention(self, shift: ShiftKind) -> InterventionKind {
        match self {
            Arm::Correct => InterventionKind::correct_for(shift),
            Arm::Wrong => InterventionKind::wrong_for(shift),
            Arm::Generic => InterventionKind::GenericRetrain,
            Arm::None => InterventionKind::None,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    /// Input and output monitors; alert indices count from the shift onset.
    pub detection: TrialResult,
    /// Episodes after onset at which the arms diverge.
    pub intervened_at: usize,
    pub mse_pre_shift: f64,
    /// Mean episode MSE over the window after the intervention, per arm in
    /// [`Arm::ALL`] order.
    pub windowed_mse: Vec<(Arm, f64)>,
}

impl InterventionResult {
    pub fn mse(&self, arm: Arm) -> f64 {
        self.windowed_mse
            .iter()
            .find(|(a, _)| *a == arm)
            .map(|&(_, v)| v)
            .expect("every arm is recorded")
    }
}

/// Runs nominal episodes, starts `shift`, intervenes at the first alert of
/// the input or output monitor (or after `max_episodes`), then replays the
/// same world under each arm.
pub fn run_intervention_trial(
    config: &LabConfig,
    shift: ShiftKind,
    max_episodes: usize,
    streams: &Rng,
) -> Result<InterventionResult> {
    let mut system = System::build(config.clone(), Ramp::GENTLE, streams.substream(&[SYSTEM_STREAM]))?;
    let specs = vec![
        MonitorSpec::martingale(INPUT_MONITOR, FeatureSource::Control(TapId(0))),
        MonitorSpec::martingale(
            OUTPUT_MONITOR,
            FeatureSource::Control(system.pipeline().prediction_tap()),
        ),
    ];
    let mut bank = MonitorBank::new(specs, &system, streams.substream(&[BANK_STREAM]))?;

    let mut pre = 0.0;
    for j in 0..PRE_SHIFT_EPISODES {
        let e = system.next_episode(j)?;
        pre += system.pipeline().episode_mse(&e)?;
    }
    let onset = PRE_SHIFT_EPISODES;
    system.begin_shift(shift, onset);
    let mut at = onset + max_episodes.max(1) - 1;
    for j in onset..onset + max_episodes {
        let e = system.next_episode(j)?;
        let fresh = bank.observe(&mut system, &e, j)?;
        if fresh.iter().any(|&f| f) {
            at = j;
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
            first_alert: bank.first_alerts()[i].map(|j| j - onset),
            final_m: values[i],
            trace: bank.traces()[i].clone(),
        })
        .collect();

    let windowed_mse = Arm::ALL
        .into_iter()
        .map(|arm| {
            let mut world = system.clone();
            world.apply_intervention(arm.intervention(shift))?;
            let mut total = 0.0;
            for j in at + 1..=at + MSE_WINDOW {
                let e = world.next_episode(j)?;
                total += world.pipeline().episode_mse(&e)?;
            }
            Ok((arm, total / MSE_WINDOW as f64))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(InterventionResult {
        detection: TrialResult { shift, monitors },
        intervened_at: at - onset,
        mse_pre_shift: pre / PRE_SHIFT_EPISODES as f64,
        windowed_mse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_shift_arms_agree_except_retrains() {
        let cfg = LabConfig {
            reference_episodes: 40,
            ..LabConfig::default()
        };
        let r = run_intervention_trial(&cfg, ShiftKind::None, 5, &Rng::new(1)).unwrap();
        assert_eq!(r.mse(Arm::Correct), r.mse(Arm::None));
        assert_eq!(r.mse(Arm::Wrong), r.mse(Arm::None));
        assert!(r.intervened_at < 5);
        assert_eq!(r.windowed_mse.len(), 4);
    }

    #[test]
    fn arm_mapping() {
        assert_eq!(
            Arm::Correct.intervention(ShiftKind::SensorDegradation),
            InterventionKind::ReplaceSensor
        );
        assert_eq!(
            Arm::Wrong.intervention(ShiftKind::SensorDegradation),
            InterventionKind::WeightedRetrain
        );
        assert_eq!(
            Arm::Correct.intervention(ShiftKind::EnvironmentShift),
            InterventionKind::WeightedRetrain
        );
        assert_eq!(
            Arm::Wrong.intervention(ShiftKind::EnvironmentShift),
            InterventionKind::ReplaceSensor
        );
    }
}
