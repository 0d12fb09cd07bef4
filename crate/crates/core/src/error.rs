use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is too close to zero to normalize")]
    NearZeroNorm { norm: f64 },
    #[error("descriptor norm {norm} deviates from 1 by more than the tolerance")]
    NotUnitNorm { norm: f64 },
    #[error("GeM power must be positive, got {0}")]
    InvalidPower(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("k = {k} is out of range for a list of {len} items")]
    OutOfRange { k: usize, len: usize },
    #[error("query has no relevant items")]
    NoRelevantItems,
    #[error("no query could be evaluated")]
    EmptyQuerySet,
    #[error("unknown protocol `{0}` (expected medium or hard)")]
    UnknownProtocol(String),
    #[error("score {0} lies outside [-1, 1]")]
    OutOfDomain(f64),
    #[error("invalid bin count {0}: at least 2 bins are required")]
    InvalidBinCount(usize),
    #[error("class {class} has a single member in the batch")]
    SingletonClass { class: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch of {batch} cannot hold 2 samples for each of {classes} classes")]
    BatchTooSmall { batch: usize, classes: usize },
    #[error("no anchor/positive pair is available to build a triplet")]
    NoValidTriplet,
    #[error("need at least {needed} items, found {available}")]
    TooFewItems { needed: usize, available: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
