//! The composed prediction system `f = f_K ∘ … ∘ f_1` with access to every
//! intermediate result.
//!
//! The control pipeline has three stages:
//!
//! 1. a frozen perception backbone `tanh(W x + b)` (input standardization is
//!    folded into `W` and `b`);
//! 2. a trainable linear regressor from features to the two-dimensional
//!    state estimate;
//! 3. a frozen proportional controller `a = -g * ŷ[0]`.
//!
//! Tap `k` exposes the output of stage `k`; tap 0 is the raw sample.

mod env;

pub use env::{generate_episode, EnvParams, Environment, ObservationMap, STATE_DIM};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{Episode, OutputVector, Sample, TapId};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Ridge penalty used by [`Pipeline::retrain`] (weights are normalized to
/// sum to one first, so the penalty is scale free).
pub const RIDGE_LAMBDA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
}

/// One stage `f_k` of a pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    /// `act(W x + b)`.
    Dense {
        weights: DMatrix<f64>,
        bias: DVector<f64>,
        activation: Activation,
    },
    /// Circular moving average over `window` neighbouring coordinates.
    Smooth { window: usize },
    /// Proportional controller on the first coordinate.
    Controller { gain: f64 },
}

impl Stage {
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            Stage::Dense { weights, .. } => Some(weights.ncols()),
            _ => None,
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            Stage::Dense { weights, .. } => weights.nrows(),
            Stage::Smooth { .. } => input_dim,
            Stage::Controller { .. } => 1,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Stage::Dense {
                weights,
                bias,
                activation,
            } => {
                let v = DVector::from_column_slice(x);
                let out = weights * v + bias;
                match activation {
                    Activation::Identity => out.iter().copied().collect(),
                    Activation::Tanh => out.iter().map(|z| z.tanh()).collect(),
                }
            }
            Stage::Smooth { window } => {
                let d = x.len();
                let w = (*window).clamp(1, d);
                if w == d {
                    let mean = x.iter().sum::<f64>() / d as f64;
                    return vec![mean; d];
                }
                (0..d)
                    .map(|i| (0..w).map(|j| x[(i + j) % d]).sum::<f64>() / w as f64)
                    .collect()
            }
            Stage::Controller { gain } => vec![-gain * x[0]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub feature_dim: usize,
    pub controller_gain: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            controller_gain: 1.0,
        }
    }
}

/// An immutable composed system. Retraining returns a new instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    input_dim: usize,
    stages: Vec<Stage>,
    /// Index (0-based) of the only stage that retraining may change.
    trainable: Option<usize>,
}

impl Pipeline {
    /// Builds a pipeline from explicit stages. `trainable` must point at a
    /// `Dense` stage if given.
    pub fn from_stages(input_dim: usize, stages: Vec<Stage>, trainable: Option<usize>) -> Result<Self> {
        let mut dim = input_dim;
        for stage in &stages {
            if let Some(expected) = stage.input_dim() {
                if expected != dim {
                    return Err(Error::DimensionMismatch { expected, got: dim });
                }
            }
            dim = stage.output_dim(dim);
        }
        if let Some(k) = trainable {
            if !matches!(stages.get(k), Some(Stage::Dense { .. })) {
                return Err(Error::InvalidParameter(format!(
                    "trainable stage {k} must be a dense stage"
                )));
            }
        }
        Ok(Self {
            input_dim,
            stages,
            trainable,
        })
    }

    /// The standard three-stage control pipeline, with its backbone drawn
    /// from `rng`, input standardization fitted on `reference`, and its
    /// regressor fitted by uniform-weight ridge regression on every
    /// reference sample.
    pub fn control(config: &PipelineConfig, reference: &[Episode], rng: &mut Rng) -> Result<Self> {
        let first = reference.first().ok_or(Error::TooFewEpisodes { needed: 1, got: 0 })?;
        let d = first.dim();
        let out_dim = first.truth()[0].dim();
        let m = config.feature_dim;

        let (mean, sd) = column_stats(reference.iter().flat_map(|e| e.samples()).map(|s| s.values()), d);
        let raw = DMatrix::from_fn(m, d, |_, _| rng.normal() / (d as f64).sqrt());
        let weights = DMatrix::from_fn(m, d, |i, j| raw[(i, j)] / sd[j]);
        let bias = DVector::from_fn(m, |i, _| -(0..d).map(|j| weights[(i, j)] * mean[j]).sum::<f64>());

        let stages = vec![
            Stage::Dense {
                weights,
                bias,
                activation: Activation::Tanh,
            },
            Stage::Dense {
                weights: DMatrix::zeros(out_dim, m),
                bias: DVector::zeros(out_dim),
                activation: Activation::Identity,
            },
            Stage::Controller {
                gain: config.controller_gain,
            },
        ];
        let untrained = Self::from_stages(d, stages, Some(1))?;
        let pairs: Vec<_> = reference.iter().flat_map(|e| e.pairs()).collect();
        let weights = vec![1.0; pairs.len()];
        untrained.retrain(&pairs, &weights)
    }

    /// Number of stages `K`.
    pub fn stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage(&self, k: usize) -> &Stage {
        &self.stages[k - 1]
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_tap(&self) -> TapId {
        TapId(self.stages.len())
    }

    /// Tap carrying the state estimate (output of the trainable stage).
    pub fn prediction_tap(&self) -> TapId {
        TapId(self.trainable.map_or(self.stages.len(), |k| k + 1))
    }

    pub fn tap_dim(&self, tap: TapId) -> Result<usize> {
        self.check_tap(tap)?;
        Ok(self.stages[..tap.0]
            .iter()
            .fold(self.input_dim, |dim, s| s.output_dim(dim)))
    }

    fn check_tap(&self, tap: TapId) -> Result<()> {
        if tap.0 > self.stages.len() {
            return Err(Error::TapOutOfRange {
                tap: tap.0,
                stages: self.stages.len(),
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `f_k ∘ … ∘ f_1` applied to a raw vector.
    pub fn tap_values(&self, x: &[f64], tap: TapId) -> Result<Vec<f64>> {
        self.check_tap(tap)?;
        self.check_input(x)?;
        let mut v = x.to_vec();
        for stage in &self.stages[..tap.0] {
            v = stage.apply(&v);
        }
        Ok(v)
    }

    pub fn tap_features(&self, s: &Sample, tap: TapId) -> Result<Vec<f64>> {
        self.tap_values(s.values(), tap)
    }

    /// Every tap's features in one forward pass; index `k` holds tap `k`.
    pub fn all_taps(&self, s: &Sample) -> Result<Vec<Vec<f64>>> {
        self.check_input(s.values())?;
        let mut out = Vec::with_capacity(self.stages.len() + 1);
        out.push(s.values().to_vec());
        for stage in &self.stages {
            let next = stage.apply(out.last().expect("nonempty"));
            out.push(next);
        }
        Ok(out)
    }

    pub fn predict_output(&self, s: &Sample) -> Result<OutputVector> {
        OutputVector::new(self.tap_features(s, self.prediction_tap())?)
    }

    /// Mean over the episode of `‖ŷ_t − y_t‖² / dim(y)`.
    pub fn episode_mse(&self, e: &Episode) -> Result<f64> {
        let mut total = 0.0;
        for (s, y) in e.pairs() {
            let yhat = self.predict_output(s)?;
            let se: f64 = yhat
                .values()
                .iter()
                .zip(y.values())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += se / y.dim() as f64;
        }
        Ok(total / e.len() as f64)
    }

    /// Refits the trainable stage by weighted ridge regression on the
    /// features that feed it. Everything else is copied unchanged.
    pub fn retrain(&self, data: &[(&Sample, &OutputVector)], weights: &[f64]) -> Result<Pipeline> {
        let k = self
            .trainable
            .ok_or_else(|| Error::InvalidParameter("pipeline has no trainable stage".into()))?;
        if weights.len() != data.len() {
            return Err(Error::WeightsLength {
                weights: weights.len(),
                data: data.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter("weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateWeights);
        }
        let (out_dim, feat_dim) = match &self.stages[k] {
            Stage::Dense { weights, .. } => (weights.nrows(), weights.ncols()),
            _ => unreachable!("checked at construction"),
        };

        // Normal equations on [features, 1].
        let p = feat_dim + 1;
        let mut gram = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DMatrix::<f64>::zeros(p, out_dim);
        let mut row = DVector::<f64>::zeros(p);
        for ((s, y), &w) in data.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            if y.dim() != out_dim {
                return Err(Error::DimensionMismatch {
                    expected: out_dim,
                    got: y.dim(),
                });
            }
            let feats = self.tap_features(s, TapId(k))?;
            row.rows_mut(0, feat_dim).copy_from_slice(&feats);
            row[feat_dim] = 1.0;
            let wn = w / total;
            gram.syger(wn, &row, &row, 1.0);
            for (o, yo) in y.values().iter().enumerate() {
                for i in 0..p {
                    rhs[(i, o)] += wn * row[i] * yo;
                }
            }
        }
        // syger only fills the lower triangle.
        gram.fill_upper_triangle_with_lower_triangle();
        for i in 0..feat_dim {
            gram[(i, i)] += RIDGE_LAMBDA;
        }
        let solution = match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => gram.lu().solve(&rhs).ok_or(Error::Singular)?,
        };

        let new_weights = DMatrix::from_fn(out_dim, feat_dim, |o, i| solution[(i, o)]);
        let new_bias = DVector::from_fn(out_dim, |o, _| solution[(feat_dim, o)]);
        let mut stages = self.stages.clone();
        stages[k] = Stage::Dense {
            weights: new_weights,
            bias: new_bias,
            activation: Activation::Identity,
        };
        Ok(Pipeline {
            input_dim: self.input_dim,
            stages,
            trainable: self.trainable,
        })
    }

    /// Replaces the trainable stage's parameters directly.
    pub fn with_regressor(&self, weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Pipeline> {
        let k = self
            .trainable
            .ok_or_else(|| Error::InvalidParameter("pipeline has no trainable stage".into()))?;
        let mut stages = self.stages.clone();
        stages[k] = Stage::Dense {
            weights,
            bias,
            activation: Activation::Identity,
        };
        Pipeline::from_stages(self.input_dim, stages, self.trainable)
    }
}

/// Per-column mean and standard deviation (floored at 1e-9).
pub(crate) fn column_stats<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0usize;
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    for row in rows {
        n += 1;
        for (j, &v) in row.iter().enumerate() {
            let delta = v - mean[j];
            mean[j] += delta / n as f64;
            m2[j] += delta * (v - mean[j]);
        }
    }
    let sd = m2
        .iter()
        .map(|s| {
            if n > 1 {
                (s / (n - 1) as f64).sqrt().max(1e-9)
            } else {
                1.0
            }
        })
        .collect();
    (mean, sd)
}

/// Recency weights `decay^age` for items ordered oldest first, where an
/// item's age is measured in episodes from the newest.
pub fn recency_weights(episode_ages: impl Iterator<Item = usize>, decay: f64) -> Vec<f64> {
    episode_ages.map(|age| decay.powi(age as i32)).collect()
}
