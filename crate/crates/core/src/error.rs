use thiserror::Error;

/// Errors produced by the numerical pipeline.
#[derive(Debug, Error)]
pub enum FdxError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("field length {got} does not match grid node count {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("weight field is negative at interior node {node}")]
    NegativeWeight { node: usize },

    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    #[error("bracketing failure: no sign change of the shooting endpoint for s in [{lo}, {hi}]")]
    BracketingFailure { lo: f64, hi: f64 },

    #[error("Newton iteration stagnated after {iterations} iterations (residual {residual:e})")]
    NewtonStagnation { iterations: usize, residual: f64 },

    #[error("state is not a solved stationary state: {0}")]
    UnsolvedState(String),

    #[error("eigensolver failed: {0}")]
    Eigensolver(String),

    #[error("degenerate spectral gap between levels {k} and {next}: {gap:e} (multiplicity > 1)")]
    DegenerateGap { k: usize, next: usize, gap: f64 },

    #[error("field has a stable component of norm {norm:e}; expected an element of the center space")]
    NotInCenterSpace { norm: f64 },

    #[error("out of admissible range: 1 + h = {value:e} <= 0 at node {node}")]
    OutOfAdmissibleRange { node: usize, value: f64 },

    #[error("non-finite value produced at t = {time}")]
    NonFinite { time: f64 },

    #[error("blow-up: sup norm {norm:e} exceeded the limit at t = {time}")]
    BlowUp { time: f64, norm: f64 },

    #[error("fixed-point iteration did not converge after {sweeps} sweeps (last increment {increment:e}, measured contraction {contraction:.4})")]
    NoConvergence {
        sweeps: usize,
        increment: f64,
        contraction: f64,
    },

    #[error("fixed-point iteration diverged: norm {norm:e} exceeds the guard {guard:e}")]
    Divergence { norm: f64, guard: f64 },

    #[error("foliation map is not a contraction: measured Lip(chi) = {lip:.4}")]
    NotContraction { lip: f64 },

    #[error("trajectory never satisfies the smallness hypothesis (eps = {eps})")]
    SmallnessNeverMet { eps: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FdxError>;
