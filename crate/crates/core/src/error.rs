use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unbound node `{0}`")]
    UnboundNode(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("duplicate node name `{0}`")]
    DuplicateNode(String),
    #[error("non-finite value produced by `{0}`")]
    NonFinite(String),
    #[error("loss node `{0}` is not scalar")]
    LossNotScalar(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("wav parse error in {path}: {reason}")]
    WavFormat { path: String, reason: String },
    #[error("partition failed: {0}")]
    Partition(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("theory parameters inconsistent: {0}")]
    TheoryParams(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
}
