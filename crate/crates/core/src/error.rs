use thiserror::Error;

/// Errors raised by the enhancement engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("signal too short: need at least {needed} samples, got {got}")]
    Length { needed: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("scenario has no sources and no noise")]
    EmptyScenario,

    #[error("steering vector is zero at frequency bin {freq}")]
    InvalidSteering { freq: usize },

    #[error("degenerate spatial covariance at frequency bin {freq}")]
    DegenerateScm { freq: usize },

    #[error("eigendecomposition did not converge at frequency bin {freq}")]
    Eigen { freq: usize },

    #[error("reference signal is all zeros")]
    InvalidReference,

    #[error("training diverged at epoch {epoch} (loss trace {trace:?})")]
    TrainingDivergence { epoch: usize, trace: Vec<f64> },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed file: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
