//! Synthetic episodic environment.
//!
//! The latent state `y_t` is a two-dimensional sinusoid (a cross-track /
//! heading analog) with a random phase per episode. Observations are
//! pixel-like: every channel carries a common illumination level plus a
//! channel-gained linear image of the state plus channel-gained sensor noise.
//! Channel gains are log-spaced, so channels live on very different scales.

use serde::{Deserialize, Serialize};

use crate::domain::{Episode, OutputVector, Sample};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Output dimension of the environment state.
pub const STATE_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvParams {
    pub trajectory_amplitude: f64,
    pub trajectory_offset: f64,
    pub process_noise_sigma: f64,
    /// Per-channel sensor noise, in units of the channel gain.
    pub observation_noise_sigma: f64,
    pub episode_length: usize,
    pub obs_dim: usize,
    pub gain_min: f64,
    pub gain_max: f64,
    /// Mean intensity shared by every channel.
    pub baseline: f64,
    /// Relative per-episode spread of the illumination level.
    pub illumination_sd: f64,
    /// Seed of the fixed state-to-observation mixing matrix.
    pub map_seed: u64,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            trajectory_amplitude: 1.0,
            trajectory_offset: 0.0,
            process_noise_sigma: 0.05,
            observation_noise_sigma: 2.0,
            episode_length: 60,
            obs_dim: 32,
            gain_min: 1.0,
            gain_max: 100.0,
            baseline: 1000.0,
            illumination_sd: 0.005,
            map_seed: 0x5EED_0B5E,
        }
    }
}

impl EnvParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(self.trajectory_amplitude > 0.0) {
            return bad("trajectory_amplitude must be > 0");
        }
        if !(self.process_noise_sigma >= 0.0) || !(self.observation_noise_sigma >= 0.0) {
            return bad("noise sigmas must be >= 0");
        }
        if !(self.illumination_sd >= 0.0) {
            return bad("illumination_sd must be >= 0");
        }
        if self.episode_length == 0 || self.obs_dim == 0 {
            return bad("episode_length and obs_dim must be >= 1");
        }
        if !(self.gain_min > 0.0 && self.gain_max >= self.gain_min) {
            return bad("gains must satisfy 0 < gain_min <= gain_max");
        }
        if !self.trajectory_offset.is_finite() || !self.baseline.is_finite() {
            return bad("offset and baseline must be finite");
        }
        Ok(())
    }

    /// The other runway: same sensor, trajectory amplitude doubled.
    pub fn shifted(&self) -> Self {
        Self {
            trajectory_amplitude: self.trajectory_amplitude * 2.0,
            ..self.clone()
        }
    }

    /// Disables every source of randomness except the episode phase.
    pub fn noiseless(&self) -> Self {
        Self {
            process_noise_sigma: 0.0,
            observation_noise_sigma: 0.0,
            illumination_sd: 0.0,
            ..self.clone()
        }
    }
}

/// Fixed smooth map from latent state to observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMap {
    gains: Vec<f64>,
    mixing: Vec<[f64; STATE_DIM]>,
    baseline: f64,
}

impl ObservationMap {
    pub fn new(params: &EnvParams) -> Self {
        let d = params.obs_dim;
        let gains: Vec<f64> = (0..d)
            .map(|c| {
                let frac = if d == 1 { 0.0 } else { c as f64 / (d - 1) as f64 };
                (params.gain_min.ln() + frac * (params.gain_max / params.gain_min).ln()).exp()
            })
            .collect();
        let mut rng = Rng::new(params.map_seed);
        let mut mixing: Vec<[f64; STATE_DIM]> = (0..d).map(|_| [rng.normal(), rng.normal()]).collect();
        // The scene pattern has zero gain-weighted mean across the array, so
        // the array-wide average carries illumination but no state.
        if d > 1 {
            let total: f64 = gains.iter().sum();
            for k in 0..STATE_DIM {
                let m = gains.iter().zip(&mixing).map(|(g, r)| g * r[k]).sum::<f64>() / total;
                mixing.iter_mut().for_each(|r| r[k] -= m);
            }
        }
        Self {
            gains,
            mixing,
            baseline: params.baseline,
        }
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    /// Noise-free observation of `state` under illumination level `light`.
    pub fn apply(&self, state: &[f64], light: f64) -> Vec<f64> {
        self.gains
            .iter()
            .zip(&self.mixing)
            .map(|(g, row)| light * self.baseline + g * (row[0] * state[0] + row[1] * state[1]))
            .collect()
    }
}

/// Environment parameters plus the derived observation map.
#[derive(Debug, Clone)]
pub struct Environment {
    params: EnvParams,
    map: ObservationMap,
}

impl Environment {
    pub fn new(params: EnvParams) -> Result<Self> {
        params.validate()?;
        let map = ObservationMap::new(&params);
        Ok(Self { params, map })
    }

    pub fn params(&self) -> &EnvParams {
        &self.params
    }

    pub fn map(&self) -> &ObservationMap {
        &self.map
    }

    pub fn shifted(&self) -> Self {
        Self::new(self.params.shifted()).expect("shifted params stay valid")
    }

    /// One episode: sinusoidal state with random phase, pixel-like
    /// observations.
    pub fn generate_episode(&self, id: u64, rng: &mut Rng) -> Episode {
        let p = &self.params;
        let phase = rng.uniform() * std::f64::consts::TAU;
        let omega = std::f64::consts::TAU / p.episode_length as f64;
        let light = 1.0 + p.illumination_sd * rng.normal();
        let mut samples = Vec::with_capacity(p.episode_length);
        let mut truth = Vec::with_capacity(p.episode_length);
        for t in 0..p.episode_length {
            let angle = omega * t as f64 + phase;
            let state = [
                p.trajectory_amplitude * angle.sin() + p.trajectory_offset + p.process_noise_sigma * rng.normal(),
                p.trajectory_amplitude * angle.cos() + p.trajectory_offset + p.process_noise_sigma * rng.normal(),
            ];
            let mut x = self.map.apply(&state, light);
            if p.observation_noise_sigma > 0.0 {
                for (v, g) in x.iter_mut().zip(self.map.gains()) {
                    *v += g * p.observation_noise_sigma * rng.normal();
                }
            }
            samples.push(Sample::new(x).expect("finite observation"));
            truth.push(OutputVector::new(state.to_vec()).expect("finite state"));
        }
        Episode::new(id, samples, truth).expect("well-formed episode")
    }
}

/// Free-function form of [`Environment::generate_episode`].
pub fn generate_episode(params: &EnvParams, id: u64, rng: &mut Rng) -> Result<Episode> {
    Ok(Environment::new(params.clone())?.generate_episode(id, rng))
}
