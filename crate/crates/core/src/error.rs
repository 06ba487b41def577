use thiserror::Error;

/// Failure classes, each tied to the process exit code the CLI reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },

    #[error("unknown key `{key}` at line {line}")]
    UnknownKey { key: String, line: usize },

    #[error("invariant breach: {0}")]
    Invariant(String),

    #[error("certification failed: {0}")]
    Certification(String),

    #[error("flow aborted: {0}")]
    FlowAbort(String),

    #[error("verification failed: {0}")]
    Verification(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } => 2,
            Error::UnknownKey { .. } => 3,
            Error::Invariant(_) => 4,
            Error::Certification(_) => 5,
            Error::FlowAbort(_) => 6,
            Error::Verification(_) => 7,
        }
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
