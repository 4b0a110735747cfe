use thiserror::Error;

/// Errors produced by the filtering pipeline.
///
/// Every variant has a stable short code (see [`Error::code`]) so that
/// command-line failures can be grepped for.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("coverage: original index {0} appears in no patch")]
    Coverage(usize),

    #[error("numeric: {0}")]
    Numeric(String),

    #[error("mode: {0}")]
    Mode(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "E_INVALID_INPUT",
            Error::DegenerateGeometry(_) => "E_DEGENERATE",
            Error::Coverage(_) => "E_COVERAGE",
            Error::Numeric(_) => "E_NUMERIC",
            Error::Mode(_) => "E_MODE",
            Error::Parse { .. } => "E_PARSE",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::Io(_) => "E_IO",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
