use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty episode")]
    EmptyEpisode,

    #[error("invalid episode: {0}")]
    InvalidEpisode(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("tap {tap} out of range for pipeline with {stages} stages")]
    TapOutOfRange { tap: usize, stages: usize },

    #[error("degenerate weights")]
    DegenerateWeights,

    #[error("weights length {weights} does not match data length {data}")]
    WeightsLength { weights: usize, data: usize },

    #[error("singular system in weighted least squares")]
    Singular,

    #[error("empty pool")]
    EmptyPool,

    #[error("need at least {needed} episodes, got {got}")]
    TooFewEpisodes { needed: usize, got: usize },

    #[error("indicator must be 0 or 1, got {0}")]
    InvalidIndicator(u8),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{} trial(s) failed, first: {message}", failed.len())]
    TrialsFailed { failed: Vec<usize>, message: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
