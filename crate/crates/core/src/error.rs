use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("capacity exceeded: need {required} live codes, only {live} available")]
    Capacity { required: usize, live: usize },

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("training diverged at epoch {epoch}; last good epoch: {last_good:?}")]
    Divergence {
        epoch: usize,
        last_good: Option<usize>,
    },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
