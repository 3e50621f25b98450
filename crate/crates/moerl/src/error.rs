//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MoeError>;

#[derive(Debug, Error)]
pub enum MoeError {
    /// A table that should be a probability distribution is not one.
    #[error("invalid distribution in {context}: row {index} sums to {sum} (or has negative entries)")]
    InvalidDistribution {
        context: &'static str,
        index: usize,
        sum: f64,
    },

    /// A scalar argument is outside its documented range.
    #[error("invalid value for {name}: {value} ({requirement})")]
    InvalidValue {
        name: &'static str,
        value: f64,
        requirement: &'static str,
    },

    /// Array shapes do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// Mixture weights violate the feasible set.
    #[error(
        "infeasible mixture weights: box violation {max_box:.3e}, simplex violation \
         {max_simplex:.3e}, equality violation {max_equality:.3e} (worst offender {detail})"
    )]
    Infeasible {
        max_box: f64,
        max_simplex: f64,
        max_equality: f64,
        detail: String,
    },

    /// An index (state, action, expert) is out of range.
    #[error("{what} index {index} out of range (< {bound} required)")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    /// A linear solve or iteration failed to meet its residual contract.
    #[error("numerical failure in {context}: residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    Numerical {
        context: &'static str,
        residual: f64,
        tol: f64,
    },

    /// An iterative procedure ran out of its sweep budget.
    #[error("{context} did not converge within {max_iter} iterations (last residual {residual:.3e})")]
    NoConvergence {
        context: &'static str,
        max_iter: usize,
        residual: f64,
    },

    /// A configuration document is malformed or references missing pieces.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
