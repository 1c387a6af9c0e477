use alloc::string::String;

use crate::tensor::Shape;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op}: {channels} channels not divisible by {parts}")]
    Divisibility {
        op: &'static str,
        channels: usize,
        parts: usize,
    },
    #[error("geometry error in {op}: {detail}")]
    Geometry { op: &'static str, detail: String },
    #[error("batch norm in train mode needs more than one value per channel (got N*H*W = 1)")]
    DegenerateBatch,
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(CheckpointError),
    #[error("non-finite loss ({0})")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated")]
    Truncated,
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error("config blob or tensor name is not valid UTF-8")]
    Encoding,
    #[error("tensor table does not match the config: {0}")]
    Mismatch(String),
}

impl From<CheckpointError> for Error {
    fn from(e: CheckpointError) -> Self {
        Error::Checkpoint(e)
    }
}
