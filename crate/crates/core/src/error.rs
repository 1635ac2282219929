use nalgebra::DVector;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed container, image or manifest.
    #[error("format error: {0}")]
    Format(String),

    /// Well-formed data that violates a model invariant.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// The solver hit its iteration cap; `best` is the last iterate.
    #[error("no convergence after {iterations} sweeps (KKT residual {residual:.3e})")]
    Convergence {
        iterations: usize,
        residual: f64,
        best: DVector<f64>,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
