use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("element {index} is degenerate or inverted (signed measure {measure:e})")]
    DegenerateElement { index: usize, measure: f64 },

    #[error("boundary facet {index} is shared by {count} elements (expected exactly one)")]
    BoundaryFacet { index: usize, count: usize },

    #[error("periodic pairing: {0}")]
    Periodic(String),

    #[error("perforation spec cannot be meshed: {0}")]
    Unmeshable(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("entry ({row}, {col}) out of range for a {n}x{n} matrix")]
    IndexOutOfRange { row: usize, col: usize, n: usize },

    #[error("right-hand side is not orthogonal to the constant vector (|1'b| / (|1| |b|) = {0:e})")]
    IncompatibleRhs(f64),

    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("element {0} carries a non-symmetric tensor")]
    NonSymmetricTensor(usize),

    #[error("tensor is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("rank-deficient least-squares design: {0}")]
    RankDeficient(String),

    #[error("invariant violated at step {step} (t = {time}): {detail}")]
    Invariant {
        step: usize,
        time: f64,
        detail: String,
    },

    #[error("ODE oracle did not reach rtol {rtol:e} after {halvings} step halvings")]
    OracleNotConverged { rtol: f64, halvings: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("expression `{expr}`: {msg}")]
    Expression { expr: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
