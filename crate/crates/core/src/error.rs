use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty cloud")]
    EmptyCloud,
    #[error("degenerate neighborhood")]
    DegenerateNeighborhood,
    #[error("degenerate")]
    Degenerate,
    #[error("inadmissible")]
    Inadmissible,
    #[error("invalid grounding")]
    InvalidGrounding,
    #[error("no valid action")]
    NoValidAction,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
