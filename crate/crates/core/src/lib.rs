//! Replacing language model (RLM) for unsupervised text style transfer.
//!
//! The pipeline: a masked-language-model encoder produces a content
//! embedding at the masked position, a style table plus fusion block turn
//! it into a style-conditioned representation, and an autoregressive
//! replacing decoder rewrites each source token with the span that
//! maximizes prediction probability times reconstruction probability.
//! Insertion and deletion heads extend the decoder to unequal-length
//! rewrites. Everything runs on a small tape-based autodiff core that is
//! generic over the scalar type.

pub mod corpus;
pub mod decoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod oracle;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::RlmError;
pub use scalar::Scalar;

/// Autodiff graph over `f32` data (training speed).
pub type Graph32 = tensor::Graph<f32>;
/// Autodiff graph over `f64` data (gradient checks, inference scoring).
pub type Graph64 = tensor::Graph<f64>;
/// Model parameters in `f32`.
pub type Model32 = model::ModelParams<f32>;
/// Model parameters in `f64`.
pub type Model64 = model::ModelParams<f64>;
