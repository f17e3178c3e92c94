use thiserror::Error;

/// Every failure mode surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported number of levels: {0}")]
    InvalidLevels(usize),
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("{what} is out of range: {value}")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("matrix is not Hermitian (deviation {0:e})")]
    NotHermitian(f64),
    #[error("invalid transition index {0}")]
    InvalidTransition(usize),
    #[error("level {0} cannot be prepared")]
    Unpreparable(usize),
    #[error("expected {expected} carriers, found {found}")]
    CarrierCount { expected: usize, found: usize },
    #[error("duration {0} s is not a whole number of nanoseconds")]
    SampleGrid(f64),
    #[error("no transmission gain configured near carrier at {0} Hz")]
    MissingGain(f64),
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("mixture component {0} collapsed below the covariance floor")]
    DegenerateMixture(usize),
    #[error("no labeled shots for state {0}")]
    MissingLabel(usize),
    #[error("confusion matrix is ill-conditioned (condition number {0:e})")]
    IllConditioned(f64),
    #[error("readout has not been calibrated on this device")]
    ReadoutNotCalibrated,
    #[error("sampler stuck: {0} consecutive rejections")]
    SamplerStuck(usize),
    #[error("log target is not finite at the initial point")]
    NonFiniteStart,
    #[error("calibration of transition {transition} did not converge in {iterations} iterations")]
    CalibrationDiverged {
        transition: usize,
        iterations: usize,
    },
    #[error("pulse tuning failed: best population {0:.3}")]
    TuningFailed(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn positive(what: &'static str, value: f64) -> Result<f64> {
    if value > 0.0 && !value.is_nan() {
        Ok(value)
    } else {
        Err(Error::NonPositive { what, value })
    }
}
