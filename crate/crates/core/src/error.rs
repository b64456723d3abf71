use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Missing or conflicting command-line options.
    #[error("usage: {0}")]
    Usage(String),

    /// A graph node produced a NaN or infinity.
    #[error("non-finite value at graph node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("degenerate transition density: {0}")]
    DegenerateDensity(String),

    #[error("ill-conditioned jacobian: condition number {condition:.3e} exceeds {limit:.1e}")]
    IllConditioned { condition: f64, limit: f64 },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("training failed at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("data generation failed: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::DimensionMismatch { .. }
            | Error::InvalidInput(_)
            | Error::Parse { .. }
            | Error::Validation(_)
            | Error::Io(_) => 2,
            Error::NonFinite { .. }
            | Error::Numerical(_)
            | Error::DegenerateDensity(_)
            | Error::IllConditioned { .. }
            | Error::Training { .. }
            | Error::Generation(_) => 3,
        }
    }

    pub(crate) fn from_json(err: serde_json::Error) -> Self {
        match err.classify() {
            serde_json::error::Category::Io => Error::Io(err.into()),
            _ => Error::Parse {
                line: err.line(),
                column: err.column(),
                message: err.to_string(),
            },
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
