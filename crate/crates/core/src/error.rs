use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("matrix is not positive definite: factorization failed at pivot {pivot} (value {value:e})")]
    Singular { pivot: usize, value: f64 },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }
}
