use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty dataset")]
    EmptyDataset,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid outcome: {0}")]
    InvalidOutcome(String),

    #[error("degenerate fold: {0}")]
    DegenerateFold(String),

    #[error("insufficient treated support: need {needed} treated observations, have {available}")]
    InsufficientSupport { needed: usize, available: usize },

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("ODE diverged at t={t}")]
    OdeDiverged { t: f64 },

    #[error("SDE diverged at t={t}")]
    SdeDiverged { t: f64 },

    #[error("infinite loss: token {token} at position {position} has probability zero")]
    InfiniteLoss { position: usize, token: u32 },

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("no reference hypothesis")]
    NoReferenceHypothesis,

    #[error("table too large: {0} sequences exceed the enumeration limit")]
    TableTooLarge(u128),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
