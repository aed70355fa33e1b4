use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("invalid init policy `{0}` (expected `gaussian:<std>` or `xavier`)")]
    InitPolicy(String),
}
