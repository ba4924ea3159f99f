use thiserror::Error;

/// Failures of the numeric kernel.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("singular or ill-conditioned system (condition estimate {condition:.3e})")]
    Singular { condition: f64 },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Tensor time series ingestion errors. Each variant maps to a distinct exit code.
#[derive(Debug, Error)]
pub enum TtsError {
    #[error("bad magic bytes (expected \"TTS1\")")]
    BadMagic,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("axis mismatch: {0}")]
    AxisMismatch(String),
    #[error("timestamps must be strictly increasing with a uniform stride: {0}")]
    NonMonotoneTimestamps(String),
    #[error("non-finite payload value at (location {location}, feature {feature}, step {step})")]
    NonFinitePayload { location: usize, feature: usize, step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TtsError {
    pub fn code(&self) -> i32 {
        match self {
            TtsError::BadMagic => 10,
            TtsError::MalformedHeader(_) => 11,
            TtsError::AxisMismatch(_) => 12,
            TtsError::NonMonotoneTimestamps(_) => 13,
            TtsError::NonFinitePayload { .. } => 14,
            TtsError::Io(_) => 15,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Tts(#[from] TtsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numerical blow-up: {0}")]
    BlowUp(String),
    #[error("unstable VAR coefficients: companion spectral radius {radius:.6} >= 1")]
    UnstableVar { radius: f64 },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("access to {0} range before it was unlocked")]
    AccessDenied(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code for the CLI. Ingestion errors keep their own codes.
    pub fn code(&self) -> i32 {
        match self {
            Error::Tts(e) => e.code(),
            Error::Config(_) => 2,
            Error::Contract(_) => 3,
            Error::AccessDenied(_) => 4,
            Error::Parse(_) | Error::Json(_) => 5,
            Error::Io(_) => 15,
            Error::UnstableVar { .. } => 20,
            Error::Diverged(_) | Error::BlowUp(_) => 21,
            Error::Diff(_) => 22,
        }
    }
}
