//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter is outside its admissible range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A mesh invariant was violated (degenerate element, broken topology).
    #[error("mesh corruption: {0}")]
    MeshCorruption(String),

    /// Index or dimension mismatch in a linear-algebra operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An iterative solver failed to reach the requested tolerance.
    #[error("solver did not converge: {method} reached residual {residual:.3e} (tol {tol:.3e}) after {iterations} iterations")]
    SolverNoConvergence {
        method: &'static str,
        residual: f64,
        tol: f64,
        iterations: usize,
    },

    /// A direct factorization hit a zero pivot or ran out of memory budget.
    #[error("factorization failed: {0}")]
    Factorization(String),

    /// Expression text could not be parsed.
    #[error("expression parse error: {0}")]
    ExprParse(String),

    /// Problem-file content is malformed or incomplete.
    #[error("problem file error: {0}")]
    ProblemFile(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
