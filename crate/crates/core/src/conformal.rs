//! Conformal-martingale (CM) baseline.
//!
//! Every episode gets a nonconformity score; its smoothed conformal p-value
//! against the scores seen so far feeds a simple-mixture power martingale
//!
//! ```text
//! SM_n = ∫₀¹ Π_{i≤n} ε p_i^{ε−1} dε
//! ```
//!
//! evaluated by the trapezoid rule on a fixed ε grid with per-node log
//! accumulators.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::domain::{Alert, TapId};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Recent-window length of the ratio score.
pub const RATIO_WINDOW: usize = 20;
/// Denominator floor of the ratio score.
pub const RATIO_DELTA: f64 = 1e-8;
/// Number of ε quadrature nodes on `[0, 1]`.
pub const QUADRATURE_NODES: usize = 999;
/// p-values are clamped from below to this value.
pub const MIN_PVALUE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    #[serde(rename = "nearest", alias = "nearest_distance")]
    NearestDistance,
    Ratio,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::NearestDistance => "nearest",
            ScoreKind::Ratio => "ratio",
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn nearest<'a>(x: &[f64], pool: impl IntoIterator<Item = &'a Vec<f64>>) -> Option<f64> {
    pool.into_iter().map(|p| distance(x, p)).min_by(f64::total_cmp)
}

/// Euclidean distance from `x` to its nearest neighbour in `pool`.
pub fn nonconformity_nearest(x: &[f64], pool: &[Vec<f64>]) -> Result<f64> {
    nearest(x, pool).ok_or(Error::EmptyPool)
}

/// Median of all pairwise distances within `points` (0 for a single point).
pub fn median_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut d: Vec<f64> = (0..points.len())
        .flat_map(|i| (i + 1..points.len()).map(move |j| (i, j)))
        .map(|(i, j)| distance(&points[i], &points[j]))
        .collect();
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    }
}

/// Nearest-reference distance over `δ` + nearest-recent distance. With no
/// recent points the denominator is `δ` + the median pairwise reference
/// distance.
pub fn nonconformity_ratio(x: &[f64], reference: &[Vec<f64>], recent: &[Vec<f64>]) -> Result<f64> {
    ratio_with(x, reference, recent, RATIO_DELTA, || {
        median_pairwise_distance(reference)
    })
}

fn ratio_with(
    x: &[f64],
    reference: &[Vec<f64>],
    recent: &[Vec<f64>],
    delta: f64,
    fallback: impl FnOnce() -> f64,
) -> Result<f64> {
    let num = nonconformity_nearest(x, reference)?;
    let den = match nearest(x, recent) {
        Some(d) => d,
        None => fallback(),
    };
    Ok(num / (delta + den))
}

/// Ratio score with an explicit floor `δ` (exposed for homogeneity checks).
pub fn nonconformity_ratio_with_delta(
    x: &[f64],
    reference: &[Vec<f64>],
    recent: &[Vec<f64>],
    delta: f64,
) -> Result<f64> {
    ratio_with(x, reference, recent, delta, || median_pairwise_distance(reference))
}

/// Smoothed conformal p-value of the newest score `scores[j−1]` among
/// `scores[..j]`. The self tie always contributes `u`.
pub fn conformal_pvalue(scores: &[f64], u: f64) -> f64 {
    let Some(&last) = scores.last() else {
        return u;
    };
    let (mut greater, mut equal) = (0usize, 0usize);
    for &s in scores {
        if s > last {
            greater += 1;
        } else if s == last {
            equal += 1;
        }
    }
    (greater as f64 + u * equal as f64) / scores.len() as f64
}

/// Incremental simple-mixture martingale.
#[derive(Debug, Clone)]
pub struct MixtureMartingale {
    eps: Vec<f64>,
    log_acc: Vec<f64>,
    n: usize,
    clamped: usize,
}

impl Default for MixtureMartingale {
    fn default() -> Self {
        Self::new()
    }
}

impl MixtureMartingale {
    pub fn new() -> Self {
        let eps: Vec<f64> = (0..QUADRATURE_NODES)
            .map(|i| i as f64 / (QUADRATURE_NODES - 1) as f64)
            .collect();
        Self {
            log_acc: vec![0.0; eps.len()],
            eps,
            n: 0,
            clamped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Number of p-values clamped up to [`MIN_PVALUE`].
    pub fn clamped(&self) -> usize {
        self.clamped
    }

    /// Folds in one p-value and returns the updated `SM_n`.
    pub fn update(&mut self, p: f64) -> Result<f64> {
        if !(p <= 1.0) || p.is_nan() || p < 0.0 {
            return Err(Error::InvalidParameter(format!("p-value {p} outside (0, 1]")));
        }
        let p = if p < MIN_PVALUE {
            tracing::warn!(p, "clamping degenerate p-value");
            self.clamped += 1;
            MIN_PVALUE
        } else {
            p
        };
        let lp = p.ln();
        for (acc, &e) in self.log_acc.iter_mut().zip(&self.eps) {
            *acc += e.ln() + (e - 1.0) * lp;
        }
        self.n += 1;
        Ok(self.value())
    }

    /// Trapezoid estimate of the mixture integral.
    pub fn value(&self) -> f64 {
        if self.n == 0 {
            return 1.0;
        }
        let max = self.log_acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let h = 1.0 / (self.eps.len() - 1) as f64;
        let last = self.log_acc.len() - 1;
        let sum: f64 = self
            .log_acc
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let w = if i == 0 || i == last { 0.5 } else { 1.0 };
                w * (l - max).exp()
            })
            .sum();
        (max + (sum * h).ln()).exp()
    }
}

/// Simple-mixture value for a whole p-value history.
pub fn mixture_update(pvalues: &[f64]) -> Result<f64> {
    let mut mm = MixtureMartingale::new();
    for &p in pvalues {
        mm.update(p)?;
    }
    Ok(mm.value())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConformalConfig {
    pub threshold: f64,
}

impl Default for ConformalConfig {
    fn default() -> Self {
        Self { threshold: 100.0 }
    }
}

/// CM baseline monitor over one tap.
///
/// For the ratio score, the last [`RATIO_WINDOW`] reference vectors are held
/// out of the numerator pool and fill the recent window until enough test
/// points have arrived.
#[derive(Debug, Clone)]
pub struct ConformalMonitor {
    name: String,
    tap: TapId,
    kind: ScoreKind,
    reference_pool: Vec<Vec<f64>>,
    filler: Vec<Vec<f64>>,
    recent: VecDeque<Vec<f64>>,
    score_history: Vec<f64>,
    mixture: MixtureMartingale,
    threshold: f64,
    alerted: bool,
    rng: Rng,
}

/// One CM update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConformalStep {
    pub score: Option<f64>,
    pub pvalue: Option<f64>,
    pub m: f64,
    pub alert: bool,
}

impl ConformalMonitor {
    pub fn new(
        name: impl Into<String>,
        tap: TapId,
        kind: ScoreKind,
        reference_pool: Vec<Vec<f64>>,
        config: ConformalConfig,
        rng: Rng,
    ) -> Result<Self> {
        if reference_pool.is_empty() {
            return Err(Error::EmptyPool);
        }
        if !(config.threshold > 1.0) {
            return Err(Error::InvalidParameter("threshold must be > 1".into()));
        }
        let (reference_pool, filler) = match kind {
            ScoreKind::Ratio if reference_pool.len() > RATIO_WINDOW => {
                let mut pool = reference_pool;
                let filler = pool.split_off(pool.len() - RATIO_WINDOW);
                (pool, filler)
            }
            _ => (reference_pool, Vec::new()),
        };
        Ok(Self {
            name: name.into(),
            tap,
            kind,
            reference_pool,
            filler,
            recent: VecDeque::with_capacity(RATIO_WINDOW),
            score_history: Vec::new(),
            mixture: MixtureMartingale::new(),
            threshold: config.threshold,
            alerted: false,
            rng,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tap(&self) -> TapId {
        self.tap
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn value(&self) -> f64 {
        self.mixture.value()
    }

    pub fn alerted(&self) -> bool {
        self.alerted
    }

    pub fn score_history(&self) -> &[f64] {
        &self.score_history
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        match self.kind {
            ScoreKind::NearestDistance => nonconformity_nearest(x, &self.reference_pool),
            ScoreKind::Ratio => {
                let mut window: Vec<Vec<f64>> = self.recent.iter().cloned().collect();
                let missing = RATIO_WINDOW.saturating_sub(window.len()).min(self.filler.len());
                window.extend(self.filler[..missing].iter().cloned());
                nonconformity_ratio(x, &self.reference_pool, &window)
            }
        }
    }

    pub fn step(&mut self, x: &[f64]) -> Result<ConformalStep> {
        let dim = self.reference_pool[0].len();
        if x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: x.len(),
            });
        }
        if self.alerted {
            return Ok(ConformalStep {
                score: None,
                pvalue: None,
                m: self.value(),
                alert: true,
            });
        }
        let score = self.score(x)?;
        self.score_history.push(score);
        let u = self.rng.uniform_open();
        let p = conformal_pvalue(&self.score_history, u);
        let m = self.mixture.update(p)?;
        if self.kind == ScoreKind::Ratio {
            if self.recent.len() == RATIO_WINDOW {
                self.recent.pop_front();
            }
            self.recent.push_back(x.to_vec());
        }
        if m >= self.threshold {
            self.alerted = true;
        }
        Ok(ConformalStep {
            score: Some(score),
            pvalue: Some(p),
            m,
            alert: self.alerted,
        })
    }

    pub fn alert(&self, episode_index: usize) -> Alert {
        Alert {
            tap: self.tap,
            monitor_name: self.name.clone(),
            episode_index,
            martingale_value: self.value(),
        }
    }
}
