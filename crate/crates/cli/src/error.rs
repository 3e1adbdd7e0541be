use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Schema(String),

    #[error("numerical failure: {0}")]
    Numerical(coherence::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("I/O failure: {0}")]
    Data(coherence::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io { .. } | CliError::Data(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<coherence::Error> for CliError {
    fn from(e: coherence::Error) -> Self {
        use coherence::Error as E;
        match e {
            E::InvalidParameter(msg) => CliError::Schema(msg),
            E::Io(_) | E::Csv(_) | E::Json(_) => CliError::Data(e),
            other => CliError::Numerical(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
