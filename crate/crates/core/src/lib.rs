//! Ternary quantization-aware training for small decoder-only language
//! models: a minimal autodiff tensor core, ternary projection layers with a
//! straight-through estimator, a transformer stack, the training loop,
//! bit-packed inference, and the analysis suite behind the `tlm` CLI.

pub mod analysis;
pub mod config;
pub mod error;
pub mod infer;
pub mod model;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Elem, Tensor};
