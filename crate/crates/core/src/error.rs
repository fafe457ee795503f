use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Case file syntax or semantic problem, with 1-based line number.
    #[error("case file error at line {line}: {msg}")]
    Case { line: usize, msg: String },

    /// Network topology problem (islands, bad split, missing bus, ...).
    #[error("topology error: {0}")]
    Topology(String),

    /// Iterative solve failed to converge; carries the last residual.
    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        what: String,
        iterations: usize,
        residual: f64,
    },

    /// A matrix factorization failed (singular system).
    #[error("singular system: {0}")]
    Singular(String),

    /// Event or override targets an element that does not exist.
    #[error("unknown target: {0}")]
    UnknownTarget(String),

    /// Coordinator stage machine violation or unsupported request.
    #[error("stage error at t={t:.6}: {msg}")]
    Stage { t: f64, msg: String },

    /// Transport-layer failure (socket mode).
    #[error("transport error: {0}")]
    Transport(String),

    /// Validation report with one message per violation.
    #[error("validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn case(line: usize, msg: impl Into<String>) -> Self {
        Error::Case {
            line,
            msg: msg.into(),
        }
    }

    pub fn topology(msg: impl Into<String>) -> Self {
        Error::Topology(msg.into())
    }
}
