use thiserror::Error;

/// Errors produced by the modelling and fitting code.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("matrix is not positive definite (failing pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("matrix is singular or indefinite")]
    Singular,

    #[error("Sinkhorn scaling infeasible: {0}")]
    SinkhornInfeasible(String),

    #[error("no permutation of size {k} has Hamming distance {target} from the identity")]
    InfeasibleHamming { k: usize, target: usize },

    #[error("inconsistent variational state: {0}")]
    State(String),

    #[error("non-finite gradient at entry ({row}, {col})")]
    NonFiniteGradient { row: usize, col: usize },

    #[error("importance weights underflowed ({0})")]
    WeightUnderflow(String),

    #[error("ELBO became non-finite at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("block size {k} exceeds the brute-force limit {limit}")]
    TooLarge { k: usize, limit: usize },

    #[error("degenerate design: whitened exposure is zero")]
    DegenerateDesign,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
        Error::Parse {
            line,
            msg: e.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
