use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),
    #[error("length mismatch in {op}: {left} vs {right}")]
    LengthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("negative entropy {0}")]
    NegativeEntropy(f64),
    #[error("log-probability ratio out of range (|delta logp| = {0}); policy has diverged")]
    RatioOverflow(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
