use thiserror::Error;

/// Errors raised by the simulator and its studies.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot normalize a zero vector")]
    ZeroVector,

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {what}")]
    NonFiniteInput { what: &'static str },

    #[error("state became non-finite after t = {last_finite_time}")]
    NonFiniteState { last_finite_time: f64 },

    #[error("token {token} has zero magnitude, but the scheme divides by it")]
    ZeroMagnitude { token: usize },

    #[error("attention vector of token {token} vanished at t = {time}")]
    DegenerateAttention { token: usize, time: f64 },

    #[error(
        "scaled magnitude q of token {token} fell below {floor:e} at t = {time} \
         (possible degenerate radial event)"
    )]
    RadialFloor { token: usize, time: f64, floor: f64 },

    #[error("cone sampling rejected {attempts} consecutive draws")]
    ConeRejected { attempts: usize },

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("unknown preset `{name}`; available: {available}")]
    UnknownPreset { name: String, available: String },

    #[error("{aborted} of {runs} replicas aborted for scheme {scheme}")]
    AbortThreshold {
        scheme: String,
        aborted: usize,
        runs: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
