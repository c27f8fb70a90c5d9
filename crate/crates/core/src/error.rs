//! Error type shared by every module of the engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions do not fit together.
    #[error("shape error: {0}")]
    Shape(String),

    /// A scalar argument is outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A computation produced NaN or an infinity.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Adapter sets, sites or message payloads disagree structurally.
    #[error("structure error: {0}")]
    Structure(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// A cache or message was used outside the pass it belongs to.
    #[error("state error: {0}")]
    State(String),

    #[error("accounting error: {0}")]
    Accounting(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    /// Malformed checkpoint or log file.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Prefixes the message with the protocol phase that failed.
    pub fn in_phase(self, phase: &str) -> Error {
        match self {
            Error::Shape(m) => Error::Shape(format!("[{phase}] {m}")),
            Error::Parameter(m) => Error::Parameter(format!("[{phase}] {m}")),
            Error::Numeric(m) => Error::Numeric(format!("[{phase}] {m}")),
            Error::Structure(m) => Error::Structure(format!("[{phase}] {m}")),
            Error::Data(m) => Error::Data(format!("[{phase}] {m}")),
            Error::State(m) => Error::State(format!("[{phase}] {m}")),
            Error::Protocol(m) => Error::Protocol(format!("[{phase}] {m}")),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
