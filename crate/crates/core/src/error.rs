use normdiff_autograd::AutogradError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Tensor(#[from] AutogradError),
    #[error(transparent)]
    Survival(#[from] normdiff_survival::SurvivalError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn csv(path: impl AsRef<std::path::Path>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 configuration, 3 data, 4 numeric or convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io { .. } | Error::Csv { .. } => 3,
            Error::Numeric(_) => 4,
            Error::Tensor(e) => match e {
                AutogradError::NonFinite { .. } => 4,
                AutogradError::Config { .. } => 2,
                _ => 3,
            },
            Error::Survival(e) => {
                if e.is_numeric() {
                    4
                } else {
                    3
                }
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
