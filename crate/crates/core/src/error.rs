use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("sequence of length {len} exceeds context {context}")]
    Length { len: usize, context: usize },
    #[error("inconsistent inputs: {0}")]
    Consistency(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("sweep failed: every run diverged ({})", .0.join("; "))]
    Sweep(Vec<String>),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used in the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Parameter(_) => "parameter",
            Error::Index(_) => "index",
            Error::Length { .. } => "length",
            Error::Consistency(_) => "consistency",
            Error::Numeric(_) => "numeric",
            Error::Validation(_) => "validation",
            Error::DegenerateFit(_) => "degenerate_fit",
            Error::Usage(_) => "usage",
            Error::Sweep(_) => "sweep",
            Error::Parse(_) => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
