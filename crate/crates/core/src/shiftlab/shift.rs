//! Shift kinds, shift state, injectors and the Poisson shift schedule.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::Episode;
use crate::error::{Error, Result};
use crate::pipeline::{EnvParams, Environment};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Input-only: ramped additive Gaussian sensor noise, labels unchanged.
    SensorDegradation,
    /// Regime change: the trajectory amplitude doubles, so labels shift.
    EnvironmentShift,
    /// Input-only: every observation scaled by `β`.
    BrightnessShift,
    None,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 4] = [
        ShiftKind::SensorDegradation,
        ShiftKind::EnvironmentShift,
        ShiftKind::BrightnessShift,
        ShiftKind::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShiftKind::SensorDegradation => "sensor_degradation",
            ShiftKind::EnvironmentShift => "environment_shift",
            ShiftKind::BrightnessShift => "brightness_shift",
            ShiftKind::None => "none",
        }
    }
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShiftKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown shift `{s}` (expected one of sensor_degradation, environment_shift, brightness_shift, none)"
            ))
        })
    }
}

/// Noise ramp of sensor degradation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ramp {
    pub step: f64,
    pub max: f64,
}

impl Ramp {
    /// `+1` per episode up to 50 (detection, intervention and race runs).
    pub const GENTLE: Ramp = Ramp { step: 1.0, max: 50.0 };
    /// `+2.5` per episode up to 100 (lifecycle runs).
    pub const AGGRESSIVE: Ramp = Ramp { step: 2.5, max: 100.0 };

    /// σ after `elapsed` episodes of active degradation.
    pub fn sigma(&self, elapsed: usize) -> f64 {
        (self.step * elapsed as f64).min(self.max)
    }
}

impl Default for Ramp {
    fn default() -> Self {
        Ramp::GENTLE
    }
}

/// Everything currently wrong with the deployed system's surroundings.
///
/// Sensor degradation and brightness live on the sensor and are cleared by
/// replacing it; an environment shift lasts until the system adopts the new
/// regime (or crashes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftState {
    pub kind: ShiftKind,
    pub onset_episode: usize,
    pub sigma: f64,
    pub sigma_step: f64,
    pub sigma_max: f64,
    pub brightness_beta: f64,
    pub env_new_params: EnvParams,
    degradation_onset: Option<usize>,
    brightness_onset: Option<usize>,
    environment_onset: Option<usize>,
}

impl ShiftState {
    pub fn new(ramp: Ramp, env_new_params: EnvParams) -> Self {
        Self {
            kind: ShiftKind::None,
            onset_episode: 0,
            sigma: 0.0,
            sigma_step: ramp.step,
            sigma_max: ramp.max,
            brightness_beta: 0.5,
            env_new_params,
            degradation_onset: None,
            brightness_onset: None,
            environment_onset: None,
        }
    }

    pub fn ramp(&self) -> Ramp {
        Ramp {
            step: self.sigma_step,
            max: self.sigma_max,
        }
    }

    /// Starts a shift at `episode`. Returns `false` if the same kind was
    /// already active (nothing changes then).
    pub fn begin(&mut self, kind: ShiftKind, episode: usize) -> bool {
        let slot = match kind {
            ShiftKind::SensorDegradation => &mut self.degradation_onset,
            ShiftKind::BrightnessShift => &mut self.brightness_onset,
            ShiftKind::EnvironmentShift => &mut self.environment_onset,
            ShiftKind::None => return false,
        };
        if slot.is_some() {
            return false;
        }
        *slot = Some(episode);
        self.kind = kind;
        self.onset_episode = episode;
        self.advance(episode);
        true
    }

    /// Updates σ for `episode` by the ramp law.
    pub fn advance(&mut self, episode: usize) {
        self.sigma = match self.degradation_onset {
            Some(onset) => self.ramp().sigma(episode.saturating_sub(onset)),
            None => 0.0,
        };
    }

    pub fn is_active(&self, kind: ShiftKind) -> bool {
        self.onset(kind).is_some()
    }

    pub fn onset(&self, kind: ShiftKind) -> Option<usize> {
        match kind {
            ShiftKind::SensorDegradation => self.degradation_onset,
            ShiftKind::BrightnessShift => self.brightness_onset,
            ShiftKind::EnvironmentShift => self.environment_onset,
            ShiftKind::None => None,
        }
    }

    /// Active shifts with their onsets, oldest first.
    pub fn active(&self) -> Vec<(ShiftKind, usize)> {
        let mut out: Vec<_> = [
            ShiftKind::SensorDegradation,
            ShiftKind::EnvironmentShift,
            ShiftKind::BrightnessShift,
        ]
        .into_iter()
        .filter_map(|k| self.onset(k).map(|o| (k, o)))
        .collect();
        out.sort_by_key(|&(k, o)| (o, k));
        out
    }

    /// Multiplicative brightness factor currently in effect.
    pub fn effective_beta(&self) -> f64 {
        if self.brightness_onset.is_some() {
            self.brightness_beta
        } else {
            1.0
        }
    }

    /// New sensor: σ back to 0, brightness back to 1.
    pub fn replace_sensor(&mut self) {
        self.degradation_onset = None;
        self.brightness_onset = None;
        self.sigma = 0.0;
    }

    /// The system now treats the shifted environment as nominal.
    pub fn resolve_environment(&mut self) {
        self.environment_onset = None;
    }

    /// Clears one shift (used when a crash ends it).
    pub fn clear(&mut self, kind: ShiftKind) {
        match kind {
            ShiftKind::SensorDegradation => {
                self.degradation_onset = None;
                self.sigma = 0.0;
            }
            ShiftKind::BrightnessShift => self.brightness_onset = None,
            ShiftKind::EnvironmentShift => self.environment_onset = None,
            ShiftKind::None => {}
        }
    }
}

/// Applies one shift kind to an episode.
///
/// Sensor degradation adds `N(0, σ²)` noise at the state's current σ;
/// brightness scales every sample by `β`; an environment shift regenerates
/// the episode from `env_new_params` with the same id.
pub fn inject(kind: ShiftKind, st: &ShiftState, episode: &Episode, rng: &mut Rng) -> Result<Episode> {
    match kind {
        ShiftKind::None => Ok(episode.clone()),
        ShiftKind::SensorDegradation => {
            if st.sigma == 0.0 {
                return Ok(episode.clone());
            }
            let samples = episode
                .samples()
                .iter()
                .map(|s| s.map(|_, v| v + st.sigma * rng.normal()))
                .collect::<Result<Vec<_>>>()?;
            episode.with_samples(samples)
        }
        ShiftKind::BrightnessShift => {
            let beta = st.brightness_beta;
            let samples = episode
                .samples()
                .iter()
                .map(|s| s.map(|_, v| beta * v))
                .collect::<Result<Vec<_>>>()?;
            episode.with_samples(samples)
        }
        ShiftKind::EnvironmentShift => {
            let env = Environment::new(st.env_new_params.clone())?;
            Ok(env.generate_episode(episode.id(), rng))
        }
    }
}

/// Poisson shift arrivals: exponential gaps with mean `lambda` (rounded up
/// to whole episodes), kinds uniform over sensor degradation and
/// environment shift, arrivals past the horizon dropped.
pub fn schedule_shifts(horizon: usize, lambda: f64, rng: &mut Rng) -> Vec<(usize, ShiftKind)> {
    let mut out = Vec::new();
    let mut at = 0usize;
    loop {
        let gap = rng.exponential(lambda).ceil().max(1.0);
        if !gap.is_finite() || gap >= (horizon - at) as f64 {
            break;
        }
        at += gap as usize;
        if at >= horizon {
            break;
        }
        let kind = if rng.coin() {
            ShiftKind::SensorDegradation
        } else {
            ShiftKind::EnvironmentShift
        };
        out.push((at, kind));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::EnvParams;

    fn episode(rng: &mut Rng) -> Episode {
        Environment::new(EnvParams::default()).unwrap().generate_episode(0, rng)
    }

    #[test]
    fn none_is_identity() {
        let mut rng = Rng::new(1);
        let e = episode(&mut rng);
        let st = ShiftState::new(Ramp::GENTLE, EnvParams::default().shifted());
        assert_eq!(inject(ShiftKind::None, &st, &e, &mut rng).unwrap(), e);
    }

    #[test]
    fn degradation_at_onset_is_noop_and_ramps() {
        let mut rng = Rng::new(2);
        let e = episode(&mut rng);
        let mut st = ShiftState::new(Ramp::GENTLE, EnvParams::default().shifted());
        assert!(st.begin(ShiftKind::SensorDegradation, 10));
        assert_eq!(st.sigma, 0.0);
        assert_eq!(inject(ShiftKind::SensorDegradation, &st, &e, &mut rng).unwrap(), e);
        for s in 0..80 {
            st.advance(10 + s);
            assert_eq!(st.sigma, (s as f64).min(50.0));
        }
        let noisy = inject(ShiftKind::SensorDegradation, &st, &e, &mut rng).unwrap();
        assert_eq!(noisy.truth(), e.truth());
        assert_ne!(noisy.samples(), e.samples());
        st.replace_sensor();
        assert_eq!(st.sigma, 0.0);
        assert!(!st.is_active(ShiftKind::SensorDegradation));
    }

    #[test]
    fn aggressive_ramp() {
        assert_eq!(Ramp::AGGRESSIVE.sigma(4), 10.0);
        assert_eq!(Ramp::AGGRESSIVE.sigma(39), 97.5);
        assert_eq!(Ramp::AGGRESSIVE.sigma(41), 100.0);
    }

    #[test]
    fn brightness_halves_norms() {
        let mut rng = Rng::new(3);
        let e = episode(&mut rng);
        let st = ShiftState::new(Ramp::GENTLE, EnvParams::default().shifted());
        let dim = inject(ShiftKind::BrightnessShift, &st, &e, &mut rng).unwrap();
        assert_eq!(dim.truth(), e.truth());
        for (a, b) in dim.samples().iter().zip(e.samples()) {
            let na: f64 = a.values().iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.values().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_eq!(na, 0.5 * nb);
        }
    }

    #[test]
    fn environment_shift_changes_labels() {
        let env = Environment::new(EnvParams::default()).unwrap();
        let st = ShiftState::new(Ramp::GENTLE, env.params().shifted());
        let mut rng = Rng::new(4);
        let (mut nominal, mut shifted) = (0.0, 0.0);
        for i in 0..200 {
            let e = env.generate_episode(i, &mut rng);
            let s = inject(ShiftKind::EnvironmentShift, &st, &e, &mut rng).unwrap();
            assert_eq!(s.id(), e.id());
            nominal += e.truth().iter().map(|y| y.values()[0].abs()).sum::<f64>();
            shifted += s.truth().iter().map(|y| y.values()[0].abs()).sum::<f64>();
        }
        assert!(shifted >= 1.5 * nominal);
    }

    #[test]
    fn repeated_begin_keeps_onset() {
        let mut st = ShiftState::new(Ramp::GENTLE, EnvParams::default());
        assert!(st.begin(ShiftKind::EnvironmentShift, 3));
        assert!(!st.begin(ShiftKind::EnvironmentShift, 9));
        assert_eq!(st.onset(ShiftKind::EnvironmentShift), Some(3));
        assert!(st.begin(ShiftKind::SensorDegradation, 5));
        assert_eq!(
            st.active(),
            vec![(ShiftKind::EnvironmentShift, 3), (ShiftKind::SensorDegradation, 5)]
        );
    }

    #[test]
    fn schedule_properties() {
        let mut rng = Rng::new(5);
        let mut total = 0usize;
        for _ in 0..1000 {
            let s = schedule_shifts(1000, 100.0, &mut rng);
            assert!(s.windows(2).all(|w| w[0].0 < w[1].0));
            assert!(s
                .iter()
                .all(|&(t, k)| t < 1000 && k != ShiftKind::None && k != ShiftKind::BrightnessShift));
            total += s.len();
        }
        let mean = total as f64 / 1000.0;
        assert!((9.0..=11.0).contains(&mean), "{mean}");

        let nonempty = (0..1000)
            .filter(|_| !schedule_shifts(1000, 100_000.0, &mut rng).is_empty())
            .count();
        assert!(nonempty <= 20, "{nonempty}");
    }

    #[test]
    fn parse_kinds() {
        for k in ShiftKind::ALL {
            assert_eq!(k.as_str().parse::<ShiftKind>().unwrap(), k);
        }
        assert!("wobble".parse::<ShiftKind>().is_err());
    }
}
