use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("segment layout mismatch: {0}")]
    Layout(String),

    #[error("unknown segment `{0}`")]
    UnknownSegment(String),

    #[error("link unreachable: zero transmission rate")]
    Unreachable,

    #[error("unknown vehicle {0}")]
    UnknownVehicle(u64),

    #[error("out-of-order slot: got {got}, last published {last}")]
    OutOfOrderSlot { got: u64, last: u64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("trace line {line}: {msg}")]
    Trace { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
