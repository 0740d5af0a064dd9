use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    Dimension {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("non-finite value at stage {stage}: {what}")]
    NonFinite { stage: usize, what: String },

    #[error("training aborted: {0}")]
    Training(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag used by the command-line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::InvalidImage(_) => "image",
            Error::InvalidKernel(_) => "kernel",
            Error::Domain(_) => "domain",
            Error::Parameter(_) => "parameter",
            Error::NonFinite { .. } => "non_finite",
            Error::Training(_) => "training",
            Error::Format(_) => "format",
            Error::UnsupportedVersion(_) => "version",
            Error::Dataset(_) => "dataset",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
