use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid generator: {0}")]
    InvalidGenerator(String),

    #[error("reducible chain: {closed_classes} closed communicating classes")]
    ReducibleChain { closed_classes: usize },

    #[error("invariant measure is not strictly positive (min entry {min_entry:e})")]
    DegenerateInvariantMeasure { min_entry: f64 },

    #[error("relative entropy is infinite: rho[{state}] > 0 but pi[{state}] = 0")]
    InfiniteEntropy { state: usize },

    #[error("point is on (or too close to) the simplex boundary: entry {state} = {value:e}")]
    BoundaryPoint { state: usize, value: f64 },

    #[error("exponent overflow: |xi_j - xi_i| = {exponent} exceeds {limit}")]
    Overflow { exponent: f64, limit: f64 },

    #[error("conjugate is unbounded above: iterate left the box |xi|_inf <= {bound}")]
    UnboundedConjugate { bound: f64 },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        best_value: f64,
        best_point: Vec<f64>,
    },

    #[error("generator is not weakly reversible: Q[{i}][{j}] > 0 but Q[{j}][{i}] = 0")]
    NotWeaklyReversible { i: usize, j: usize },

    #[error("not a gradient system: detailed balance fails (max violation {max_violation:e})")]
    NotGradientSystem { max_violation: f64 },

    #[error("step size too large: state left the simplex by {excursion:e} at t = {time}")]
    StepSizeTooLarge { time: f64, excursion: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("tilt too strong for thinning: exponent {exponent} exceeds {limit}")]
    TiltTooStrong { exponent: f64, limit: f64 },

    #[error("degenerate weight in stiffness operator at edge {edge} (mobility {mobility:e})")]
    DegenerateWeight { edge: usize, mobility: f64 },

    #[error("cross-check of {quantity} failed: {first} vs {second} (tolerance {tolerance:e})")]
    CrossCheckFailed {
        quantity: String,
        first: f64,
        second: f64,
        tolerance: f64,
    },

    #[error("rate functional undefined at t = {time}: {source}")]
    RateUndefined {
        time: f64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
