use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("state does not factorize across the requested cuts (residual {residual:.3e})")]
    Structure { residual: f64 },

    #[error("series tail norm {tail:.3e} exceeds tolerance {tol:.3e} at order {order}")]
    Precision { tail: f64, tol: f64, order: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("resource guard: {0}")]
    Resource(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("numerical breakdown at site {site}: {reason}")]
    Breakdown { site: usize, reason: String },

    #[error("range error: {0}")]
    Range(String),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn arg<S: Into<String>>(msg: S) -> Error {
    Error::Argument(msg.into())
}
