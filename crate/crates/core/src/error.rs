use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not Hermitian (max deviation {deviation:.3e})")]
    NotHermitian { deviation: f64 },

    #[error("vector is not normalized (norm {norm})")]
    NotNormalized { norm: f64 },

    #[error("invalid density operator: {0}")]
    InvalidDensity(String),

    #[error("non-finite matrix entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("eigendecomposition did not converge")]
    EigenFailure,

    #[error("ambiguous continuation at t = {time}: best overlap {overlap:.4} below threshold")]
    AmbiguousContinuation { time: f64, overlap: f64 },

    #[error("projector is not idempotent (max deviation {deviation:.3e})")]
    NotIdempotent { deviation: f64 },

    #[error("projectors are not mutually orthogonal (max deviation {deviation:.3e})")]
    NonOrthogonal { deviation: f64 },

    #[error("projector is not an atom of the algebra")]
    NotAnAtom,

    #[error("algebra closure exceeds cap of {cap} elements")]
    ClosureCap { cap: usize },

    #[error("probability derivatives do not sum to zero (sum {sum:.3e})")]
    UnbalancedPdot { sum: f64 },

    #[error("projector derivatives do not sum to zero (max entry {deviation:.3e})")]
    DerivativeSum { deviation: f64 },

    #[error("division by zero probability p[{state}] = {probability:.3e}")]
    ZeroProbabilityDivision { state: usize, probability: f64 },

    #[error("rate matrix has a pole in column {state}")]
    PolePresent { state: usize },

    #[error("pole in rate interval at t = {time}, state {state}")]
    PoleInInterval { time: f64, state: usize },

    #[error("Feller series not converged: last term max entry {tail:.3e}")]
    TruncationNotConverged { tail: f64 },

    #[error("negative exit rate {rate} for state {state} at t = {time}")]
    NegativeRate { state: usize, time: f64, rate: f64 },

    #[error("pole encountered by sample path at t = {time} in state {state}")]
    PoleEncountered { time: f64, state: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
