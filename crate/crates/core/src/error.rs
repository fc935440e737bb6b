use thiserror::Error;

/// Errors produced anywhere in the estimation, testing and I/O pipeline.
#[derive(Debug, Error)]
pub enum FvicmError {
    #[error("invalid basis: {0}")]
    InvalidBasis(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The weight matrix of the quadratic inference function stayed singular
    /// after the ridge guard.
    #[error("ill-conditioned weight matrix: {0}")]
    Conditioning(String),

    #[error("nothing to test: {0}")]
    NothingToTest(String),

    #[error("variance component fit failed: {0}")]
    VarianceFit(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("simulation study failed: {0}")]
    Study(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FvicmError {
    /// Short category tag used by the command line front end.
    pub fn category(&self) -> &'static str {
        match self {
            FvicmError::InvalidBasis(_) | FvicmError::Dimension(_) => "model",
            FvicmError::InvalidData(_) | FvicmError::Parse { .. } | FvicmError::Csv(_) => "data",
            FvicmError::InvalidParameter(_) | FvicmError::Config(_) => "config",
            FvicmError::Conditioning(_) | FvicmError::VarianceFit(_) => "numeric",
            FvicmError::NothingToTest(_) => "test",
            FvicmError::Study(_) => "study",
            FvicmError::Io(_) | FvicmError::Json(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, FvicmError>;
