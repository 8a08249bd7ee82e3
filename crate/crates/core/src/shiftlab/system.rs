//! The deployed system: environment, sensor state, control pipeline,
//! frozen probe network, deployment history and its monitors.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conformal::{ConformalConfig, ConformalMonitor, ScoreKind};
use crate::domain::{representative_sample, Episode, ReferenceDataset, Sample, TapId};
use crate::error::{Error, Result};
use crate::monitor::{MartingaleMonitor, MonitorConfig};
use crate::pipeline::{recency_weights, EnvParams, Environment, Pipeline, PipelineConfig, Stage};
use crate::rng::Rng;

use super::shift::{inject, Ramp, ShiftKind, ShiftState};

/// Episodes used by weighted retraining.
pub const RETRAIN_WINDOW: usize = 100;
/// Per-episode-age decay of weighted retraining.
pub const RETRAIN_DECAY: f64 = 0.9;

const REFERENCE_STREAM: u64 = 1;
const BACKBONE_STREAM: u64 = 2;
const EPISODE_STREAM: u64 = 3;
const NOISE_STREAM: u64 = 4;
const SAMPLE_STREAM: u64 = 5;
const MONITOR_STREAM: u64 = 6;
const POOL_STREAM: u64 = 7;

/// Shared settings of every experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabConfig {
    pub env: EnvParams,
    pub pipeline: PipelineConfig,
    pub reference_episodes: usize,
    pub monitor: MonitorConfig,
    pub conformal: ConformalConfig,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            env: EnvParams::default(),
            pipeline: PipelineConfig::default(),
            reference_episodes: 200,
            monitor: MonitorConfig::default(),
            conformal: ConformalConfig::default(),
        }
    }
}

impl LabConfig {
    /// Sets the alert threshold of both monitor families.
    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.monitor.martingale.threshold = threshold;
        self.conformal.threshold = threshold;
        self
    }
}

/// Where a monitor reads its features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureSource {
    Control(TapId),
    Probe(TapId),
}

impl FeatureSource {
    fn key(self) -> u64 {
        match self {
            FeatureSource::Control(t) => t.0 as u64,
            FeatureSource::Probe(t) => 1_000 + t.0 as u64,
        }
    }

    pub fn tap(self) -> TapId {
        match self {
            FeatureSource::Control(t) | FeatureSource::Probe(t) => t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MonitorKind {
    Martingale,
    Conformal(ScoreKind),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorSpec {
    pub name: String,
    pub source: FeatureSource,
    pub kind: MonitorKind,
}

impl MonitorSpec {
    pub fn martingale(name: &str, source: FeatureSource) -> Self {
        Self {
            name: name.to_string(),
            source,
            kind: MonitorKind::Martingale,
        }
    }

    pub fn conformal(name: &str, source: FeatureSource, score: ScoreKind) -> Self {
        Self {
            name: name.to_string(),
            source,
            kind: MonitorKind::Conformal(score),
        }
    }
}

/// Frozen multi-scale pooling network over the raw observation, used as a
/// bank of extra feature taps. Layer `k` averages over progressively wider
/// circular windows; the last layer is a global average.
pub fn probe_network(input_dim: usize) -> Result<Pipeline> {
    let mut stages: Vec<Stage> = [2usize, 4, 8]
        .into_iter()
        .filter(|&w| w < input_dim)
        .map(|window| Stage::Smooth { window })
        .collect();
    stages.push(Stage::Smooth { window: input_dim });
    Pipeline::from_stages(input_dim, stages, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    /// New sensor: clears degradation and brightness.
    ReplaceSensor,
    /// Recency-weighted retrain on the last episodes; adopts the current
    /// environment as nominal.
    WeightedRetrain,
    /// Uniform retrain on everything seen, reference included.
    GenericRetrain,
    /// The intervention matching the other shift family.
    Wrong,
    None,
    /// Replace the sensor, then weighted retrain.
    All,
}

impl InterventionKind {
    pub const ALL: [InterventionKind; 6] = [
        InterventionKind::ReplaceSensor,
        InterventionKind::WeightedRetrain,
        InterventionKind::GenericRetrain,
        InterventionKind::Wrong,
        InterventionKind::None,
        InterventionKind::All,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InterventionKind::ReplaceSensor => "replace_sensor",
            InterventionKind::WeightedRetrain => "weighted_retrain",
            InterventionKind::GenericRetrain => "generic_retrain",
            InterventionKind::Wrong => "wrong",
            InterventionKind::None => "none",
            InterventionKind::All => "all",
        }
    }

    /// The intervention that resolves `shift`.
    pub fn correct_for(shift: ShiftKind) -> InterventionKind {
        match shift {
            ShiftKind::SensorDegradation | ShiftKind::BrightnessShift => InterventionKind::ReplaceSensor,
            ShiftKind::EnvironmentShift => InterventionKind::WeightedRetrain,
            ShiftKind::None => InterventionKind::None,
        }
    }

    /// The converse of [`InterventionKind::correct_for`].
    pub fn wrong_for(shift: ShiftKind) -> InterventionKind {
        match shift {
            ShiftKind::SensorDegradation | ShiftKind::BrightnessShift => InterventionKind::WeightedRetrain,
            ShiftKind::EnvironmentShift => InterventionKind::ReplaceSensor,
            ShiftKind::None => InterventionKind::None,
        }
    }
}

impl fmt::Display for InterventionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InterventionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InterventionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown intervention `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct System {
    config: LabConfig,
    base_env: Environment,
    nominal: Environment,
    actual: Environment,
    shift: ShiftState,
    pipeline: Pipeline,
    probe: Pipeline,
    reference: ReferenceDataset,
    history: VecDeque<Episode>,
    history_cap: Option<usize>,
    streams: Rng,
    refreshes: u64,
}

impl System {
    /// Draws the reference dataset and fits the control pipeline on it.
    pub fn build(config: LabConfig, ramp: Ramp, streams: Rng) -> Result<Self> {
        if config.reference_episodes < 2 {
            return Err(Error::TooFewEpisodes {
                needed: 2,
                got: config.reference_episodes,
            });
        }
        let base_env = Environment::new(config.env.clone())?;
        let mut rng = streams.substream(&[REFERENCE_STREAM]);
        let episodes: Vec<Episode> = (0..config.reference_episodes as u64)
            .map(|i| base_env.generate_episode(i, &mut rng))
            .collect();
        let pipeline = Pipeline::control(&config.pipeline, &episodes, &mut streams.substream(&[BACKBONE_STREAM]))?;
        let probe = probe_network(config.env.obs_dim)?;
        Ok(Self {
            shift: ShiftState::new(ramp, base_env.params().shifted()),
            nominal: base_env.clone(),
            actual: base_env.clone(),
            base_env,
            pipeline,
            probe,
            reference: ReferenceDataset::new(episodes)?,
            history: VecDeque::new(),
            history_cap: None,
            streams,
            refreshes: 0,
            config,
        })
    }

    /// Keep only the newest `cap` deployment episodes.
    pub fn with_history_cap(mut self, cap: usize) -> Self {
        self.history_cap = Some(cap.max(RETRAIN_WINDOW));
        self
    }

    pub fn config(&self) -> &LabConfig {
        &self.config
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn probe(&self) -> &Pipeline {
        &self.probe
    }

    pub fn reference(&self) -> &ReferenceDataset {
        &self.reference
    }

    pub fn shift(&self) -> &ShiftState {
        &self.shift
    }

    pub fn nominal_env(&self) -> &Environment {
        &self.nominal
    }

    pub fn actual_env(&self) -> &Environment {
        &self.actual
    }

    pub fn history(&self) -> &VecDeque<Episode> {
        &self.history
    }

    pub fn features(&self, source: FeatureSource, s: &Sample) -> Result<Vec<f64>> {
        match source {
            FeatureSource::Control(t) => self.pipeline.tap_features(s, t),
            FeatureSource::Probe(t) => self.probe.tap_features(s, t),
        }
    }

    /// Starts a shift at episode `j`. An environment shift moves the world
    /// to the other regime: doubled amplitude from the original one, or
    /// back to the original from a doubled one.
    pub fn begin_shift(&mut self, kind: ShiftKind, j: usize) -> bool {
        if kind == ShiftKind::EnvironmentShift && !self.shift.is_active(kind) {
            let base = self.base_env.params();
            let next = if self.nominal.params().trajectory_amplitude > base.trajectory_amplitude {
                base.clone()
            } else {
                base.shifted()
            };
            self.shift.env_new_params = next.clone();
            self.actual = Environment::new(next).expect("derived from a valid regime");
        }
        self.shift.begin(kind, j)
    }

    /// Ends a shift without mitigation (a crash).
    pub fn clear_shift(&mut self, kind: ShiftKind) {
        if kind == ShiftKind::EnvironmentShift && self.shift.is_active(kind) {
            self.actual = self.nominal.clone();
        }
        self.shift.clear(kind);
    }

    /// Deployment episode `j`. Randomness is keyed by `j`, so systems built
    /// from the same streams see the same world regardless of what they did
    /// before.
    pub fn next_episode(&mut self, j: usize) -> Result<Episode> {
        self.shift.advance(j);
        let mut ep_rng = self.streams.substream(&[EPISODE_STREAM, j as u64]);
        let mut episode = self.actual.generate_episode(j as u64, &mut ep_rng);
        if self.shift.is_active(ShiftKind::SensorDegradation) {
            let mut noise = self.streams.substream(&[NOISE_STREAM, j as u64]);
            episode = inject(ShiftKind::SensorDegradation, &self.shift, &episode, &mut noise)?;
        }
        if self.shift.is_active(ShiftKind::BrightnessShift) {
            episode = inject(ShiftKind::BrightnessShift, &self.shift, &episode, &mut ep_rng)?;
        }
        self.history.push_back(episode.clone());
        if let Some(cap) = self.history_cap {
            while self.history.len() > cap {
                self.history.pop_front();
            }
        }
        Ok(episode)
    }

    /// Representative features of episode `j` for `source`. One draw per
    /// (source, episode), shared by every monitor on that source.
    pub fn episode_features(&self, source: FeatureSource, episode: &Episode, j: usize) -> Result<Vec<f64>> {
        let mut rng = self.streams.substream(&[SAMPLE_STREAM, source.key(), j as u64]);
        self.features(source, representative_sample(episode, &mut rng)?)
    }

    /// One representative feature vector per reference episode, oldest first.
    pub fn reference_pool(&self, source: FeatureSource) -> Result<Vec<Vec<f64>>> {
        let mut rng = self.streams.substream(&[POOL_STREAM, 0, source.key()]);
        self.reference
            .episodes()
            .iter()
            .map(|e| self.features(source, representative_sample(e, &mut rng)?))
            .collect()
    }

    /// Draws a fresh reference set from the current nominal regime through
    /// the current pipeline; returns one pool per source.
    pub fn fresh_pools(&mut self, sources: &[FeatureSource]) -> Result<Vec<Vec<Vec<f64>>>> {
        self.refreshes += 1;
        let mut rng = self.streams.substream(&[POOL_STREAM, self.refreshes]);
        let episodes: Vec<Episode> = (0..self.config.reference_episodes as u64)
            .map(|i| self.nominal.generate_episode(i, &mut rng))
            .collect();
        sources
            .iter()
            .map(|&src| {
                let mut pick = rng.substream(&[src.key()]);
                episodes
                    .iter()
                    .map(|e| self.features(src, representative_sample(e, &mut pick)?))
                    .collect()
            })
            .collect()
    }

    /// Applies an intervention. `Wrong` resolves against the newest active
    /// shift and is a no-op when nothing is active.
    pub fn apply_intervention(&mut self, kind: InterventionKind) -> Result<()> {
        match kind {
            InterventionKind::None => Ok(()),
            InterventionKind::ReplaceSensor => {
                self.shift.replace_sensor();
                Ok(())
            }
            InterventionKind::WeightedRetrain => self.weighted_retrain(),
            InterventionKind::GenericRetrain => self.generic_retrain(),
            InterventionKind::Wrong => match self.shift.active().last() {
                Some(&(shift, _)) => self.apply_intervention(InterventionKind::wrong_for(shift)),
                None => Ok(()),
            },
            InterventionKind::All => {
                self.apply_intervention(InterventionKind::ReplaceSensor)?;
                self.apply_intervention(InterventionKind::WeightedRetrain)
            }
        }
    }

    fn weighted_retrain(&mut self) -> Result<()> {
        let n = self.history.len().min(RETRAIN_WINDOW);
        if n == 0 {
            return Err(Error::TooFewEpisodes { needed: 1, got: 0 });
        }
        let window: Vec<&Episode> = self.history.iter().skip(self.history.len() - n).collect();
        let mut pairs = Vec::new();
        let mut ages = Vec::new();
        for (i, e) in window.iter().enumerate() {
            for pair in e.pairs() {
                pairs.push(pair);
                ages.push(n - 1 - i);
            }
        }
        let weights = recency_weights(ages.into_iter(), RETRAIN_DECAY);
        self.pipeline = self.pipeline.retrain(&pairs, &weights)?;
        self.nominal = self.actual.clone();
        self.shift.resolve_environment();
        Ok(())
    }

    fn generic_retrain(&mut self) -> Result<()> {
        let pairs: Vec<_> = self
            .reference
            .episodes()
            .iter()
            .chain(self.history.iter())
            .flat_map(|e| e.pairs())
            .collect();
        let weights = vec![1.0; pairs.len()];
        self.pipeline = self.pipeline.retrain(&pairs, &weights)?;
        Ok(())
    }
}

/// Either monitor family behind one interface.
#[derive(Debug, Clone)]
pub enum AnyMonitor {
    Martingale(MartingaleMonitor),
    Conformal(ConformalMonitor),
}

impl AnyMonitor {
    pub fn step(&mut self, x: &[f64]) -> Result<(f64, bool)> {
        match self {
            AnyMonitor::Martingale(m) => m.step(x).map(|o| (o.m, o.alert)),
            AnyMonitor::Conformal(m) => m.step(x).map(|o| (o.m, o.alert)),
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            AnyMonitor::Martingale(m) => m.value(),
            AnyMonitor::Conformal(m) => m.value(),
        }
    }
}

/// A set of monitors observing one system, with their alert bookkeeping.
#[derive(Debug, Clone)]
pub struct MonitorBank {
    specs: Vec<MonitorSpec>,
    monitors: Vec<AnyMonitor>,
    first_alert: Vec<Option<usize>>,
    traces: Vec<Vec<f64>>,
    streams: Rng,
    generation: u64,
}

impl MonitorBank {
    /// Builds every monitor on the system's reference dataset.
    pub fn new(specs: Vec<MonitorSpec>, system: &System, streams: Rng) -> Result<Self> {
        let pools = specs
            .iter()
            .map(|s| system.reference_pool(s.source))
            .collect::<Result<Vec<_>>>()?;
        let mut bank = Self {
            first_alert: vec![None; specs.len()],
            traces: vec![Vec::new(); specs.len()],
            monitors: Vec::new(),
            specs,
            streams,
            generation: 0,
        };
        bank.monitors = bank.build(pools, system.config())?;
        Ok(bank)
    }

    fn build(&self, pools: Vec<Vec<Vec<f64>>>, config: &LabConfig) -> Result<Vec<AnyMonitor>> {
        self.specs
            .iter()
            .zip(pools)
            .map(|(spec, pool)| {
                // Every monitor in a bank draws the same partner indices and
                // pair-order coins, so a race compares features, not luck.
                let rng = self.streams.substream(&[MONITOR_STREAM, self.generation]);
                Ok(match spec.kind {
                    MonitorKind::Martingale => AnyMonitor::Martingale(MartingaleMonitor::new(
                        spec.name.clone(),
                        spec.source.tap(),
                        pool,
                        config.monitor.clone(),
                        rng,
                    )?),
                    MonitorKind::Conformal(score) => AnyMonitor::Conformal(ConformalMonitor::new(
                        spec.name.clone(),
                        spec.source.tap(),
                        score,
                        pool,
                        config.conformal,
                        rng,
                    )?),
                })
            })
            .collect()
    }

    pub fn specs(&self) -> &[MonitorSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Feeds episode `j` to every monitor; returns which ones alerted on
    /// this step for the first time since the last reset.
    pub fn observe(&mut self, system: &mut System, episode: &Episode, j: usize) -> Result<Vec<bool>> {
        self.replenish(system)?;
        let mut fresh = vec![false; self.specs.len()];
        for (i, spec) in self.specs.iter().enumerate() {
            let x = system.episode_features(spec.source, episode, j)?;
            let was = matches!(&self.monitors[i], AnyMonitor::Martingale(m) if m.alerted())
                || matches!(&self.monitors[i], AnyMonitor::Conformal(m) if m.alerted());
            let (m, alert) = self.monitors[i].step(&x)?;
            self.traces[i].push(m);
            if alert && !was {
                fresh[i] = true;
                self.first_alert[i].get_or_insert(j);
            }
        }
        Ok(fresh)
    }

    /// Gives martingale monitors that ran out of partners a fresh pool from
    /// the nominal regime, keeping their state.
    fn replenish(&mut self, system: &mut System) -> Result<()> {
        let empty: Vec<usize> = (0..self.monitors.len())
            .filter(
                |&i| matches!(&self.monitors[i], AnyMonitor::Martingale(m) if m.partners_left() == 0 && !m.alerted()),
            )
            .collect();
        if empty.is_empty() {
            return Ok(());
        }
        let sources: Vec<_> = empty.iter().map(|&i| self.specs[i].source).collect();
        for (i, pool) in empty.into_iter().zip(system.fresh_pools(&sources)?) {
            if let AnyMonitor::Martingale(m) = &mut self.monitors[i] {
                m.replenish(pool)?;
            }
        }
        Ok(())
    }

    /// Restarts every monitor on fresh pools from the system's nominal
    /// regime. First-alert records and traces are kept.
    pub fn reset(&mut self, system: &mut System) -> Result<()> {
        let all: Vec<usize> = (0..self.specs.len()).collect();
        self.reset_some(system, &all)
    }

    /// Restarts the listed monitors only.
    pub fn reset_some(&mut self, system: &mut System, which: &[usize]) -> Result<()> {
        if which.is_empty() {
            return Ok(());
        }
        let sources: Vec<_> = which.iter().map(|&i| self.specs[i].source).collect();
        let pools = system.fresh_pools(&sources)?;
        self.generation += 1;
        let mut rebuilt = self.build_subset(which, pools, system.config())?;
        for &i in which.iter().rev() {
            self.monitors[i] = rebuilt.pop().expect("one monitor per index");
        }
        Ok(())
    }

    fn build_subset(&self, which: &[usize], pools: Vec<Vec<Vec<f64>>>, config: &LabConfig) -> Result<Vec<AnyMonitor>> {
        let specs = which.iter().map(|&i| self.specs[i].clone()).collect();
        let sub = Self {
            specs,
            monitors: Vec::new(),
            first_alert: Vec::new(),
            traces: Vec::new(),
            streams: self.streams.clone(),
            generation: self.generation,
        };
        sub.build(pools, config)
    }

    /// Episode index of each monitor's first alert.
    pub fn first_alerts(&self) -> &[Option<usize>] {
        &self.first_alert
    }

    /// `M` after every step, per monitor.
    pub fn traces(&self) -> &[Vec<f64>] {
        &self.traces
    }

    pub fn values(&self) -> Vec<f64> {
        self.monitors.iter().map(AnyMonitor::value).collect()
    }

    pub fn all_alerted(&self) -> bool {
        self.first_alert.iter().all(Option::is_some)
    }
}
