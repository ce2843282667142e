use thiserror::Error;

/// Unified error type for the whole pipeline.
///
/// Every fallible operation reports one of these classes; the CLI maps them
/// onto exit codes (config/usage errors vs. runtime failures).
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension disagreement between operands.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Input that is structurally valid but numerically unusable
    /// (zero-norm vector where a direction is required, empty range, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Caller broke an API contract (backward called twice, query before
    /// any message, prediction into the past, ...).
    #[error("usage: {0}")]
    Usage(String),

    /// Prediction target earlier than the flow timestamp.
    #[error("temporal order violated: target t={target} precedes flow t={flow}")]
    TemporalOrder { target: f64, flow: f64 },

    /// Wire or checkpoint bytes that do not parse; `offset` is the byte
    /// position where decoding failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    /// Rejected experiment configuration.
    #[error("config: {0}")]
    Config(String),

    /// Training diverged or could not proceed.
    #[error("training failed at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
