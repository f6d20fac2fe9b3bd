use alloc::string::String;

/// Errors raised by the training core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("input too short: {got} frames, the conv stack needs at least {min}")]
    TooShort { got: usize, min: usize },
    #[error("empty token sequence")]
    EmptyTokens,
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("insufficient data: {0}")]
    Data(String),
    #[error("style discriminator used before pretraining")]
    NotPretrained,
    #[error("{model} held-out accuracy {accuracy:.4} below gate {gate:.2}")]
    Gate { model: &'static str, accuracy: f64, gate: f64 },
    #[error("non-finite loss term {term} at step {step}")]
    NonFiniteLoss { term: &'static str, step: u64 },
}

pub type Result<T> = core::result::Result<T, Error>;
