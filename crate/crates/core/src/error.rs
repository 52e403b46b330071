use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("non-finite value encountered in {0}")]
    NonFiniteValue(&'static str),

    #[error("iterate diverged: norm {norm:e} exceeds {limit:e}")]
    Diverged { norm: f64, limit: f64 },

    #[error("inner iterate is not converged: residual {residual:e} exceeds {limit:e}")]
    InnerNotConverged { residual: f64, limit: f64 },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate instance: {0}")]
    DegenerateInstance(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("step {k}: {source}")]
    AtStep {
        k: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn at_step(self, k: usize) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep { k, source: Box::new(e) },
        }
    }

    /// Strips any step annotation.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            e => e,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
