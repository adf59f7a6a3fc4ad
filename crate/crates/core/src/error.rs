//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A point could not be located inside a mesh, or a mesh is broken.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// A numeric quantity left its admissible range (NaN, negative pivot, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An iterative solver exhausted its iteration budget.
    #[error("solver did not converge: {context} (residual {residual:.3e})")]
    Nonconvergence { context: String, residual: f64 },

    /// The requested operation is not defined for this configuration.
    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    /// Configuration text could not be parsed or validated.
    #[error("config error: {0}")]
    Config(String),

    /// A checkpoint or data file is malformed.
    #[error("format error in {path} (line {line}): {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code for the CLI surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Nonconvergence { .. } | Error::Numerical(_) => 3,
            Error::Io(_) | Error::Format { .. } => 4,
            _ => 1,
        }
    }
}
