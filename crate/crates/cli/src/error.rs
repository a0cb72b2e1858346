use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] metasolve::Error),

    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    /// 2 validation/config, 3 I/O or format, 4 numerical, 5 gradcheck.
    pub fn exit_code(&self) -> u8 {
        use metasolve::Error as E;
        match self {
            CliError::Core(E::Io(_) | E::Format { .. }) | CliError::Io { .. } => 3,
            CliError::Core(E::Singular { .. } | E::Numerical(_) | E::Domain { .. }) => 4,
            CliError::Core(_) | CliError::Config { .. } | CliError::Usage(_) => 2,
            CliError::GradCheck(_) => 5,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}
