use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("no uncensored records")]
    NoEvents,

    #[error("time grid needs at least 2 bins, got {0}")]
    TooFewBins(usize),

    #[error("negative time {0}")]
    NegativeTime(f64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("zero vector in cosine")]
    ZeroCosine,

    #[error("degenerate encoding")]
    DegenerateEncoding,

    #[error("degenerate interpolation row {0}")]
    DegenerateInterpolation(usize),

    #[error("CI undefined: no comparable pairs")]
    CiUndefined,

    #[error("coalition enumeration too large: M = {0} > 20")]
    CoalitionTooLarge(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("bad VLSB file: {0}")]
    Format(String),

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },

    #[error("non-finite value at ({0},{1})")]
    NonFinite(usize, usize),

    #[error("non-finite loss for patient {patient} at step {step}")]
    NonFiniteLoss { patient: String, step: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
