//! Online pairwise recency classifier.
//!
//! Given two feature vectors `(a, b)`, the classifier guesses which one is
//! the more recent. Its score is antisymmetric by construction,
//!
//! ```text
//! s(a, b) = g(φ(a)) − g(φ(b)),      P(first is recent) = σ(s(a, b))
//! ```
//!
//! where `φ` is a fixed embedding of the standardized features `z`,
//! `[tanh z, ln(1 + z²), ln(1 + ‖z‖²/d)]`, which sees location changes,
//! per-coordinate spread changes and overall atypicality, and `g` is either
//! linear or a one-hidden-layer network. Writing the
//! linear model over pair features `[a; b; a − b]` with a bias, swap
//! antisymmetry forces the `a` and `b` blocks to cancel into the difference
//! block and the bias to zero, which is exactly the form above.
//!
//! Ties (`s = 0`) predict [`Position::First`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{ReferenceDataset, Sample};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Position {
    First,
    Second,
}

impl Position {
    pub fn other(self) -> Position {
        match self {
            Position::First => Position::Second,
            Position::Second => Position::First,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub learning_rate: f64,
    /// Width of the optional hidden layer; `None` selects the linear model.
    pub hidden: Option<usize>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            hidden: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Model {
    Linear {
        theta: DVector<f64>,
    },
    Hidden {
        u: DMatrix<f64>,
        c: DVector<f64>,
        v: DVector<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecencyClassifier {
    input_dim: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    learning_rate: f64,
    model: Model,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl RecencyClassifier {
    /// Zero-initialized output weights, so every score starts at 0.
    pub fn new(input_dim: usize, config: &ClassifierConfig, rng: &mut Rng) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidParameter("input_dim must be >= 1".into()));
        }
        if !(config.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning_rate must be > 0".into()));
        }
        let e = 2 * input_dim + 1;
        let model = match config.hidden {
            None => Model::Linear {
                theta: DVector::zeros(e),
            },
            Some(h) => {
                let scale = 1.0 / (e as f64).sqrt();
                Model::Hidden {
                    u: DMatrix::from_fn(h, e, |_, _| scale * rng.normal()),
                    c: DVector::zeros(h),
                    v: DVector::zeros(h),
                }
            }
        };
        Ok(Self {
            input_dim,
            mean: vec![0.0; input_dim],
            scale: vec![1.0; input_dim],
            learning_rate: config.learning_rate,
            model,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    /// Fits the standardization used by the embedding on a feature pool.
    pub fn fit_scaler(&mut self, pool: &[Vec<f64>]) -> Result<()> {
        if pool.is_empty() {
            return Err(Error::EmptyPool);
        }
        for v in pool {
            self.check(v)?;
        }
        let (mean, sd) = crate::pipeline::column_stats(pool.iter().map(Vec::as_slice), self.input_dim);
        self.mean = mean;
        self.scale = sd;
        Ok(())
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn embed(&self, x: &[f64]) -> DVector<f64> {
        let d = self.input_dim;
        let z: Vec<f64> = (0..d).map(|j| (x[j] - self.mean[j]) / self.scale[j]).collect();
        let radial = (z.iter().map(|v| v * v).sum::<f64>() / d as f64).ln_1p();
        DVector::from_fn(2 * d + 1, |i, _| match i {
            i if i < d => z[i].tanh(),
            i if i < 2 * d => z[i - d].mul_add(z[i - d], 1.0).ln(),
            _ => radial,
        })
    }

    fn g(&self, phi: &DVector<f64>) -> f64 {
        match &self.model {
            Model::Linear { theta } => theta.dot(phi),
            Model::Hidden { u, c, v } => {
                let h = (u * phi + c).map(f64::tanh);
                v.dot(&h)
            }
        }
    }

    /// Gradient of `g(φ)` with respect to the flattened parameters.
    fn grad_g(&self, phi: &DVector<f64>) -> Vec<f64> {
        match &self.model {
            Model::Linear { .. } => phi.iter().copied().collect(),
            Model::Hidden { u, c, v } => {
                let h = (u * phi + c).map(f64::tanh);
                let mut out = Vec::with_capacity(u.len() + c.len() + v.len());
                // u is column-major in nalgebra; keep the same order as params().
                for col in 0..u.ncols() {
                    for row in 0..u.nrows() {
                        out.push(v[row] * (1.0 - h[row] * h[row]) * phi[col]);
                    }
                }
                for row in 0..c.len() {
                    out.push(v[row] * (1.0 - h[row] * h[row]));
                }
                out.extend(h.iter());
                out
            }
        }
    }

    /// Antisymmetric score; positive means "first is more recent".
    pub fn score(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.g(&self.embed(a)) - self.g(&self.embed(b)))
    }

    pub fn predict_recency(&self, a: &[f64], b: &[f64]) -> Result<Position> {
        Ok(if self.score(a, b)? >= 0.0 {
            Position::First
        } else {
            Position::Second
        })
    }

    /// Logistic loss of the score against the true recent position.
    pub fn loss(&self, a: &[f64], b: &[f64], label: Position) -> Result<f64> {
        let s = self.score(a, b)?;
        Ok(match label {
            Position::First => softplus(-s),
            Position::Second => softplus(s),
        })
    }

    /// Analytic gradient of [`Self::loss`] with respect to [`Self::params`].
    pub fn gradient(&self, a: &[f64], b: &[f64], label: Position) -> Result<Vec<f64>> {
        let s = self.score(a, b)?;
        let y = if label == Position::First { 1.0 } else { 0.0 };
        let coef = sigmoid(s) - y;
        let ga = self.grad_g(&self.embed(a));
        let gb = self.grad_g(&self.embed(b));
        Ok(ga.iter().zip(&gb).map(|(x, z)| coef * (x - z)).collect())
    }

    /// One SGD step on the logistic loss.
    pub fn train_pair(&mut self, a: &[f64], b: &[f64], label: Position) -> Result<()> {
        let grad = self.gradient(a, b, label)?;
        let mut params = self.params();
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= self.learning_rate * g;
        }
        self.set_params(&params)
    }

    /// Flattened trainable parameters.
    pub fn params(&self) -> Vec<f64> {
        match &self.model {
            Model::Linear { theta } => theta.iter().copied().collect(),
            Model::Hidden { u, c, v } => u.iter().chain(c.iter()).chain(v.iter()).copied().collect(),
        }
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("classifier weights"));
        }
        match &mut self.model {
            Model::Linear { theta } => {
                if params.len() != theta.len() {
                    return Err(Error::DimensionMismatch {
                        expected: theta.len(),
                        got: params.len(),
                    });
                }
                theta.copy_from_slice(params);
            }
            Model::Hidden { u, c, v } => {
                let (nu, nc) = (u.len(), c.len());
                if params.len() != nu + nc + v.len() {
                    return Err(Error::DimensionMismatch {
                        expected: nu + nc + v.len(),
                        got: params.len(),
                    });
                }
                u.copy_from_slice(&params[..nu]);
                c.copy_from_slice(&params[nu..nu + nc]);
                v.copy_from_slice(&params[nu + nc..]);
            }
        }
        Ok(())
    }

    /// Pseudo-recency warmup on a pool ordered oldest first: the first half
    /// plays "old", the second half "new".
    pub fn warmup_on_pool(&mut self, pool: &[Vec<f64>], rng: &mut Rng, n_pairs: usize) -> Result<()> {
        if pool.len() < 2 {
            return Err(Error::TooFewEpisodes {
                needed: 2,
                got: pool.len(),
            });
        }
        let half = pool.len() / 2;
        for _ in 0..n_pairs {
            let old = &pool[rng.index(half)];
            let new = &pool[half + rng.index(pool.len() - half)];
            if rng.coin() {
                self.train_pair(new, old, Position::First)?;
            } else {
                self.train_pair(old, new, Position::Second)?;
            }
        }
        Ok(())
    }

    /// Warmup on a reference dataset. Episodes are split by id; each pair
    /// uses one random sample from each chosen episode, passed through
    /// `extract`.
    pub fn warmup<F>(&mut self, reference: &ReferenceDataset, extract: F, rng: &mut Rng, n_pairs: usize) -> Result<()>
    where
        F: Fn(&Sample) -> Result<Vec<f64>>,
    {
        if reference.len() < 2 {
            return Err(Error::TooFewEpisodes {
                needed: 2,
                got: reference.len(),
            });
        }
        let mut order: Vec<_> = reference.episodes().iter().collect();
        order.sort_by_key(|e| e.id());
        let half = order.len() / 2;
        for _ in 0..n_pairs {
            let old_ep = order[rng.index(half)];
            let new_ep = order[half + rng.index(order.len() - half)];
            let old = extract(crate::domain::representative_sample(old_ep, rng)?)?;
            let new = extract(crate::domain::representative_sample(new_ep, rng)?)?;
            if rng.coin() {
                self.train_pair(&new, &old, Position::First)?;
            } else {
                self.train_pair(&old, &new, Position::Second)?;
            }
        }
        Ok(())
    }
}
