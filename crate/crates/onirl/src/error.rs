//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or argument mismatch in a numerical operation.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The integrated state left the representable range.
    #[error("simulation diverged at t = {t}: non-finite state")]
    Divergence { t: f64 },

    /// A windowed operation was asked for data older than the trajectory start,
    /// or for a time that is not on the sample grid.
    #[error("insufficient history at t = {t}: {reason}")]
    InsufficientHistory { t: f64, reason: String },

    /// The least-squares gain matrix lost positive definiteness.
    #[error("least-squares gain matrix is no longer positive definite")]
    GainDivergence,

    /// The stacked regressor does not have full column rank.
    #[error("regressor rank condition violated: smallest singular value {smin:.3e} <= {tol:.3e}")]
    RankDeficient { smin: f64, tol: f64 },

    /// The stacked right-hand side is too small for a meaningful solve.
    #[error("degenerate right-hand side: norm {norm:.3e} below floor {floor:.3e}")]
    DegenerateRhs { norm: f64, floor: f64 },

    /// Configuration file or configuration value is not usable.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Malformed input data (trajectory CSV, state list).
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// I/O failure with the offending path attached.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid<S: Into<String>>(msg: S) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code for the CLI: 2 invalid config, 3 parse error,
    /// 4 numerical divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 2,
            Error::Parse { .. } => 3,
            Error::Divergence { .. } | Error::GainDivergence => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
