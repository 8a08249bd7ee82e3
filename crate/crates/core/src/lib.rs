//! Multi-tap martingale monitors for diagnosing distribution shifts in
//! episodic data streams.
//!
//! A deployed system is modelled as a composed [`pipeline::Pipeline`] whose
//! raw input, intermediate features and outputs can each be watched by an
//! independent [`monitor::MartingaleMonitor`]. Which monitor fires first
//! tells the operator *what* shifted, and therefore which intervention to
//! apply. A conformal-martingale baseline lives in [`conformal`], and
//! [`shiftlab`] contains the synthetic shift injectors, the intervention
//! engine and the lifecycle simulator used by the `driftscope` CLI.

pub mod classifier;
pub mod cli;
pub mod conformal;
pub mod domain;
pub mod error;
pub mod monitor;
pub mod pipeline;
pub mod rng;
pub mod shiftlab;

pub use domain::{Alert, Episode, OutputVector, ReferenceDataset, Sample, TapId};
pub use error::{Error, Result};
pub use rng::Rng;
