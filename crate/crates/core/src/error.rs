use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("autodiff graph error: {0}")]
    Graph(String),

    #[error("degenerate attention row: all positions masked (row {row})")]
    AllMaskedRow { row: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key: {0}")]
    UnknownConfigKey(String),

    #[error("quantization error: {0}")]
    Quant(String),

    #[error("non-ternary entry {value} at position {index}")]
    NonTernary { index: usize, value: f32 },

    #[error("corrupt ternary code 0b11 at element {index}")]
    CorruptCode { index: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("vocab error: {0}")]
    Vocab(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite gradient in parameter '{0}'; aborting step")]
    NonFiniteGrad(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("gradient check error: {0}")]
    GradCheck(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
