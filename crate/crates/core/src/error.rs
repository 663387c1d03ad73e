use thiserror::Error;

/// Errors produced anywhere in the calibration lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("state error: {0}")]
    State(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("run aborted in stage {stage} at step {step}: {reason}")]
    AbortedRun {
        stage: String,
        step: usize,
        reason: String,
    },

    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    ConfigParse(String),
}

impl Error {
    /// Short machine-readable kind, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid-config",
            Error::InvalidInput(_) => "invalid-input",
            Error::Shape { .. } => "shape-error",
            Error::NonFinite(_) => "non-finite",
            Error::State(_) => "state-error",
            Error::CorruptFile(_) => "corrupt-file",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::ContractViolation(_) => "contract-violation",
            Error::UndefinedCorrelation(_) => "undefined-correlation",
            Error::AbortedRun { .. } => "aborted-run",
            Error::ChecksumMismatch(_) => "checksum-mismatch",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::ConfigParse(_) => "config-parse",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
