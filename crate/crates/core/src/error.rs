use thiserror::Error;

/// Errors produced anywhere in the forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unknown segment id `{0}`")]
    UnknownSegment(String),

    #[error("conflicting distances for edge {src}-{dst}: {first} vs {second}")]
    ConflictingEdge {
        src: String,
        dst: String,
        first: f64,
        second: f64,
    },

    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-deterministic function: repeated evaluation gave {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
