use std::path::PathBuf;

/// Errors raised by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two vectors (or a vector and an index) disagree on dimensionality.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// Inconsistent configuration, e.g. gold matching on a card without gold contexts.
    #[error("configuration error: {0}")]
    Config(String),

    /// A remote backend could not be reached or timed out.
    #[error("transport error talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },

    /// A remote backend answered, but not according to the wire contract.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// The completion backend reported an error of its own.
    #[error("backend error (status {status:?}): {message}")]
    Backend { status: Option<u16>, message: String },

    /// Transport failure while completing a specific prompt.
    #[error("completion failed for prompt {prompt_hash}: {source}")]
    Completion {
        prompt_hash: String,
        #[source]
        source: Box<Error>,
    },

    /// The backend produced nothing but stop content.
    #[error("backend returned an empty response")]
    EmptyResponse,

    /// A persisted index was built with a different encoder.
    #[error("stale index: expected fingerprint {expected}, found {found}")]
    StaleIndex { expected: String, found: String },

    /// A file did not parse according to its format.
    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    /// The prompt does not fit the character budget even without pseudo-dialog pairs.
    #[error("prompt budget of {budget} chars is below the minimum of {minimum}")]
    Budget { budget: usize, minimum: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, message: impl ToString) -> Self {
        Error::Format {
            what,
            message: message.to_string(),
        }
    }

    /// Whether the error came from an unreachable or misbehaving remote backend.
    pub fn is_backend_failure(&self) -> bool {
        match self {
            Error::Transport { .. }
            | Error::Protocol(_)
            | Error::Backend { .. }
            | Error::EmptyResponse => true,
            Error::Completion { source, .. } => source.is_backend_failure(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
