use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("window exceeds series length: window {window} > length {len}")]
    WindowTooLong { window: usize, len: usize },
    #[error("series has no timestep labels")]
    MissingLabels,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{0} produced non-finite values")]
    NonFinite(&'static str),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("loss node is not scalar (shape {0:?})")]
    NonScalarLoss(Vec<usize>),
    #[error("gradient selector mismatch: `{left}` vs `{right}`")]
    SelectorMismatch { left: String, right: String },
    #[error("channel index {index} out of range for {channels} channels")]
    ChannelOutOfRange { index: usize, channels: usize },
    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("F1 undefined: labels must contain both classes")]
    F1Undefined,
    #[error("model state is untrained; no learning rate recorded")]
    Untrained,
    #[error("csv line {line}: {msg}")]
    Csv { line: u64, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
