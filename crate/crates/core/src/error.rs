use thiserror::Error;

/// Errors raised by the library. Verification probes never return these for
/// failed checks; failures are reported inside their verdicts.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid problem: invariant `{invariant}` violated ({detail})")]
    InvalidProblem {
        invariant: &'static str,
        detail: String,
    },

    #[error("quadrature budget exceeded: {0}")]
    QuadratureBudget(String),

    #[error("grid too large: {0}")]
    GridTooLarge(String),

    #[error("CFL violation: time step {dt:e} exceeds stability bound {bound:e}")]
    Cfl { dt: f64, bound: f64 },

    #[error("non-finite state at step {step} (scenario {scenario}, particle {particle})")]
    NonFinite {
        step: usize,
        scenario: usize,
        particle: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("support outside grid box: atoms {atoms:?}")]
    OutsideGrid { atoms: Vec<usize> },

    #[error("oracle refused: {0}")]
    OracleRefused(String),

    #[error("transport solver failure: {0}")]
    Transport(String),

    #[error("at ladder point (eps={eps}, n={n}, m={m}): {source}")]
    Ladder {
        eps: f64,
        n: usize,
        m: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
