//! Episodic data model shared by every module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// One observation vector `x^t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    values: Vec<f64>,
}

impl Sample {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameter("sample must have dim >= 1".into()));
        }
        check_finite(&values, "sample")?;
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Applies `f` coordinate-wise, returning a new sample.
    pub fn map(&self, mut f: impl FnMut(usize, f64) -> f64) -> Result<Self> {
        Self::new(self.values.iter().enumerate().map(|(i, &v)| f(i, v)).collect())
    }
}

/// Ground-truth output `y^t` (cross-track / heading analog).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputVector {
    values: Vec<f64>,
}

impl OutputVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values, "output vector")?;
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// A recorded interaction sequence with its ground truth.
///
/// Episodes are immutable once built; shift injection produces new episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    id: u64,
    samples: Vec<Sample>,
    truth: Vec<OutputVector>,
}

impl Episode {
    pub fn new(id: u64, samples: Vec<Sample>, truth: Vec<OutputVector>) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyEpisode)?;
        if samples.len() != truth.len() {
            return Err(Error::InvalidEpisode(format!(
                "{} samples but {} truth vectors",
                samples.len(),
                truth.len()
            )));
        }
        let dim = first.dim();
        if let Some(bad) = samples.iter().find(|s| s.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.dim(),
            });
        }
        Ok(Self { id, samples, truth })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn truth(&self) -> &[OutputVector] {
        &self.truth
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].dim()
    }

    /// Same truth, new samples. Used by input-only shift injectors.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Result<Self> {
        Self::new(self.id, samples, self.truth.clone())
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&Sample, &OutputVector)> {
        self.samples.iter().zip(self.truth.iter())
    }
}

/// The historical dataset `D_orig` collected before deployment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceDataset {
    episodes: Vec<Episode>,
}

impl ReferenceDataset {
    pub fn new(episodes: Vec<Episode>) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::TooFewEpisodes { needed: 1, got: 0 });
        }
        let n = episodes.len() as u64;
        if let Some(e) = episodes.iter().find(|e| e.id() >= n) {
            return Err(Error::InvalidEpisode(format!(
                "reference episode id {} not below dataset size {n}",
                e.id()
            )));
        }
        Ok(Self { episodes })
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }
}

/// Probe point in a composed pipeline: 0 is the raw input, `K` the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TapId(pub usize);

impl TapId {
    pub const INPUT: TapId = TapId(0);

    pub fn index(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for TapId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "tap{}", self.0)
    }
}

/// Emitted when a monitor's martingale reaches its threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub tap: TapId,
    pub monitor_name: String,
    /// Episode index counted from deployment start.
    pub episode_index: usize,
    pub martingale_value: f64,
}

/// Draws one sample uniformly from the episode.
pub fn representative_sample<'a>(episode: &'a Episode, rng: &mut Rng) -> Result<&'a Sample> {
    if episode.is_empty() {
        return Err(Error::EmptyEpisode);
    }
    Ok(&episode.samples()[rng.index(episode.len())])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn episode(len: usize) -> Episode {
        let samples = (0..len).map(|i| Sample::new(vec![i as f64, 0.5]).unwrap()).collect();
        let truth = (0..len).map(|_| OutputVector::new(vec![0.0, 0.0]).unwrap()).collect();
        Episode::new(0, samples, truth).unwrap()
    }

    #[test]
    fn rejects_bad_episodes() {
        assert!(matches!(Episode::new(0, vec![], vec![]), Err(Error::EmptyEpisode)));
        let s = Sample::new(vec![1.0]).unwrap();
        let t = OutputVector::new(vec![0.0]).unwrap();
        assert!(Episode::new(0, vec![s.clone(), s.clone()], vec![t.clone()]).is_err());
        let s2 = Sample::new(vec![1.0, 2.0]).unwrap();
        assert!(Episode::new(0, vec![s, s2], vec![t.clone(), t]).is_err());
        assert!(Sample::new(vec![f64::NAN]).is_err());
        assert!(OutputVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn single_sample_episode_returns_it() {
        let e = episode(1);
        let mut rng = Rng::new(5);
        assert_eq!(representative_sample(&e, &mut rng).unwrap(), &e.samples()[0]);
    }

    #[test]
    fn representative_sample_is_deterministic() {
        let e = episode(30);
        let a = representative_sample(&e, &mut Rng::new(9)).unwrap().clone();
        let b = representative_sample(&e, &mut Rng::new(9)).unwrap().clone();
        assert_eq!(a, b);
    }

    #[test]
    fn representative_sample_is_uniform() {
        // Binomial(10000, 1/30): mean 333.3, sd 17.95, so +-3 sd is [279, 387];
        // the accepted band [233, 433] is wider still.
        let e = episode(30);
        let mut rng = Rng::new(2024);
        let mut counts = [0usize; 30];
        for _ in 0..10_000 {
            let s = representative_sample(&e, &mut rng).unwrap();
            counts[s.values()[0] as usize] += 1;
        }
        for c in counts {
            assert!((233..=433).contains(&c), "count {c}");
        }
    }

    #[test]
    fn reference_ids_must_precede_deployment() {
        let mut e = episode(2);
        e.id = 3;
        assert!(ReferenceDataset::new(vec![e]).is_err());
        assert!(ReferenceDataset::new(vec![]).is_err());
    }
}
