//! Bernoulli-betting martingale monitors.
//!
//! Each episode the monitor pairs the new tap feature with a reference
//! feature in a random order and asks its [`RecencyClassifier`] which one is
//! newer. With `Z_j = 1` on a correct guess and `S_n = Σ Z_j`,
//!
//! ```text
//! M_n = exp(t · S_n) / (q + p · e^t)^n
//! ```
//!
//! is a nonnegative martingale with `M_0 = 1` whenever the stream is
//! exchangeable with the reference. That needs the partner to be a point the
//! classifier has never trained on, so partners are drawn without
//! replacement; a reused partner lets the classifier learn the sampling
//! quirks of its pool. Ville/Doob then bound the chance of ever reaching the
//! threshold `C` by `1 / C`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierConfig, Position, RecencyClassifier};
use crate::domain::{Alert, TapId};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MartingaleParams {
    /// Tilt `t`.
    pub tilt: f64,
    /// Null success probability `p` (`q = 1 − p`).
    pub p: f64,
    /// Alert threshold `C`.
    pub threshold: f64,
}

impl Default for MartingaleParams {
    fn default() -> Self {
        Self {
            tilt: 1.0,
            p: 0.5,
            threshold: 100.0,
        }
    }
}

impl MartingaleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::InvalidParameter("p must lie in (0, 1)".into()));
        }
        if !self.tilt.is_finite() || !(self.threshold > 1.0) {
            return Err(Error::InvalidParameter("tilt must be finite and threshold > 1".into()));
        }
        Ok(())
    }

    fn normalizer(&self) -> f64 {
        (1.0 - self.p) + self.p * self.tilt.exp()
    }

    /// Multiplier applied to `M` for indicator `z`.
    pub fn factor(&self, z: bool) -> f64 {
        let num = if z { self.tilt.exp() } else { 1.0 };
        num / self.normalizer()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MartingaleState {
    pub n: u64,
    pub s: u64,
    pub m: f64,
    pub params: MartingaleParams,
}

impl MartingaleState {
    pub fn new(params: MartingaleParams) -> Self {
        Self {
            n: 0,
            s: 0,
            m: 1.0,
            params,
        }
    }

    /// `exp(t S) / (q + p e^t)^n`, evaluated in log space.
    pub fn closed_form(&self) -> f64 {
        let p = &self.params;
        (p.tilt * self.s as f64 - self.n as f64 * p.normalizer().ln()).exp()
    }
}

/// Advances the martingale by one indicator.
pub fn martingale_update(st: &MartingaleState, z: u8) -> Result<MartingaleState> {
    let hit = match z {
        0 => false,
        1 => true,
        other => return Err(Error::InvalidIndicator(other)),
    };
    Ok(MartingaleState {
        n: st.n + 1,
        s: st.s + u64::from(hit),
        m: st.m * st.params.factor(hit),
        params: st.params,
    })
}

/// `T` iff `M ≥ C`.
pub fn test_alert(st: &MartingaleState) -> bool {
    st.m >= st.params.threshold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub martingale: MartingaleParams,
    pub classifier: ClassifierConfig,
    /// Warm-up pairs drawn from the older half of the pool. When nonzero,
    /// only the newer half serves as deployment partners.
    pub warmup_pairs: usize,
    /// Skip the prequential update during deployment.
    pub freeze_after_warmup: bool,
    /// Restart the martingale at 1 whenever it falls below 1 (a CUSUM-style
    /// repeated test). Without it, a long quiet stretch drags `M` far below
    /// 1 and a late shift takes correspondingly longer to flag. With it, the
    /// false-alarm guarantee becomes a mean time between false alarms rather
    /// than a bound on the probability of ever alerting.
    #[serde(default)]
    pub restart_below_one: bool,
    /// Factor applied to the classifier weights at each restart, so that a
    /// quiet stretch does not leave them drifted away from zero.
    #[serde(default = "unit")]
    pub restart_shrink: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            martingale: MartingaleParams::default(),
            classifier: ClassifierConfig::default(),
            warmup_pairs: 0,
            freeze_after_warmup: false,
            restart_below_one: false,
            restart_shrink: 1.0,
        }
    }
}

/// Result of one [`MartingaleMonitor::step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// `None` once the monitor has latched an alert.
    pub z: Option<u8>,
    pub m: f64,
    pub alert: bool,
}

#[derive(Debug, Clone)]
pub struct MartingaleMonitor {
    name: String,
    tap: TapId,
    config: MonitorConfig,
    classifier: RecencyClassifier,
    reference_pool: Vec<Vec<f64>>,
    state: MartingaleState,
    alerted: bool,
    partners: Vec<usize>,
    base_rng: Rng,
    rng: Rng,
    generation: u64,
}

const WARMUP_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;

impl MartingaleMonitor {
    /// Builds a monitor over a tap and warms its classifier on the pool.
    /// `reference_pool` must be ordered oldest first.
    pub fn new(
        name: impl Into<String>,
        tap: TapId,
        reference_pool: Vec<Vec<f64>>,
        config: MonitorConfig,
        rng: Rng,
    ) -> Result<Self> {
        config.martingale.validate()?;
        if !(0.0..=1.0).contains(&config.restart_shrink) {
            return Err(Error::InvalidParameter("restart_shrink must lie in [0, 1]".into()));
        }
        let first = reference_pool.first().ok_or(Error::EmptyPool)?;
        let dim = first.len();
        let classifier = RecencyClassifier::new(dim, &config.classifier, &mut rng.substream(&[INIT_STREAM]))?;
        let mut monitor = Self {
            name: name.into(),
            tap,
            state: MartingaleState::new(config.martingale),
            config,
            classifier,
            reference_pool,
            alerted: false,
            partners: Vec::new(),
            rng: rng.substream(&[STEP_STREAM, 0]),
            base_rng: rng,
            generation: 0,
        };
        monitor.rewarm()?;
        Ok(monitor)
    }

    fn rewarm(&mut self) -> Result<()> {
        let dim = self.reference_pool[0].len();
        let mut init = self.base_rng.substream(&[INIT_STREAM, self.generation]);
        self.classifier = RecencyClassifier::new(dim, &self.config.classifier, &mut init)?;
        self.classifier.fit_scaler(&self.reference_pool)?;
        let n = self.reference_pool.len();
        let first_partner = if self.config.warmup_pairs > 0 && n >= 4 {
            let mut warm = self.base_rng.substream(&[WARMUP_STREAM, self.generation]);
            self.classifier
                .warmup_on_pool(&self.reference_pool[..n / 2], &mut warm, self.config.warmup_pairs)?;
            n / 2
        } else {
            0
        };
        self.shuffle_partners(first_partner);
        Ok(())
    }

    /// Queues pool indices `from..` in random order; `step` pops from the back.
    fn shuffle_partners(&mut self, from: usize) {
        self.partners = (from..self.reference_pool.len()).collect();
        self.partners.shuffle(&mut self.rng);
    }

    /// Unused deployment partners left in the pool.
    pub fn partners_left(&self) -> usize {
        self.partners.len()
    }

    /// Swaps in a fresh partner pool while keeping the classifier and the
    /// martingale. Soundness is preserved because none of the new points
    /// has been trained on.
    pub fn replenish(&mut self, pool: Vec<Vec<f64>>) -> Result<()> {
        self.check_pool(&pool)?;
        self.reference_pool = pool;
        self.shuffle_partners(0);
        Ok(())
    }

    fn check_pool(&self, pool: &[Vec<f64>]) -> Result<()> {
        let first = pool.first().ok_or(Error::EmptyPool)?;
        if first.len() != self.classifier.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.classifier.input_dim(),
                got: first.len(),
            });
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tap(&self) -> TapId {
        self.tap
    }

    pub fn state(&self) -> &MartingaleState {
        &self.state
    }

    pub fn value(&self) -> f64 {
        self.state.m
    }

    pub fn alerted(&self) -> bool {
        self.alerted
    }

    pub fn classifier(&self) -> &RecencyClassifier {
        &self.classifier
    }

    pub fn reference_pool(&self) -> &[Vec<f64>] {
        &self.reference_pool
    }

    /// One deployment episode: unused reference partner, fair-coin order,
    /// predict, update `M`, then (unless frozen) learn from the revealed
    /// label. An exhausted pool is reshuffled with a warning, which weakens
    /// the soundness guarantee; see [`MartingaleMonitor::replenish`].
    pub fn step(&mut self, features: &[f64]) -> Result<StepOutcome> {
        if self.reference_pool.is_empty() {
            return Err(Error::EmptyPool);
        }
        if features.len() != self.classifier.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.classifier.input_dim(),
                got: features.len(),
            });
        }
        if self.alerted {
            return Ok(StepOutcome {
                z: None,
                m: self.state.m,
                alert: true,
            });
        }
        if self.partners.is_empty() {
            tracing::warn!(monitor = %self.name, "reference partners exhausted; reusing the pool");
            self.shuffle_partners(0);
        }
        let idx = self.partners.pop().expect("pool is nonempty");
        let reference = &self.reference_pool[idx];
        let (a, b, truth) = if self.rng.coin() {
            (features, reference.as_slice(), Position::First)
        } else {
            (reference.as_slice(), features, Position::Second)
        };
        let guess = self.classifier.predict_recency(a, b)?;
        let z = u8::from(guess == truth);
        self.state = martingale_update(&self.state, z)?;
        if self.config.restart_below_one && self.state.m < 1.0 {
            self.state = MartingaleState::new(self.config.martingale);
            if self.config.restart_shrink != 1.0 {
                let shrunk: Vec<f64> = self
                    .classifier
                    .params()
                    .iter()
                    .map(|w| w * self.config.restart_shrink)
                    .collect();
                self.classifier.set_params(&shrunk)?;
            }
        }
        if !self.config.freeze_after_warmup {
            self.classifier.train_pair(a, b, truth)?;
        }
        if test_alert(&self.state) {
            self.alerted = true;
        }
        Ok(StepOutcome {
            z: Some(z),
            m: self.state.m,
            alert: self.alerted,
        })
    }

    /// Alert record for the current state.
    pub fn alert(&self, episode_index: usize) -> Alert {
        Alert {
            tap: self.tap,
            monitor_name: self.name.clone(),
            episode_index,
            martingale_value: self.state.m,
        }
    }

    /// Restarts the martingale and re-warms the classifier, optionally on a
    /// new reference pool.
    pub fn reset(&mut self, new_reference: Option<Vec<Vec<f64>>>) -> Result<()> {
        if let Some(pool) = new_reference {
            self.check_pool(&pool)?;
            self.reference_pool = pool;
        }
        self.generation += 1;
        self.state = MartingaleState::new(self.config.martingale);
        self.alerted = false;
        self.rng = self.base_rng.substream(&[STEP_STREAM, self.generation]);
        self.rewarm()
    }
}
