//! Steered text generation for small decoder-only transformers.
//!
//! A frozen language model is steered toward an attribute (a topic word
//! list or a linear sentiment discriminator) by taking a few gradient steps
//! on its key/value history before every sampled token. The crate contains
//! the tensor/autodiff core, the toy transformer with trainer and
//! checkpoints, the attribute models, the steering engine, and an
//! evaluation harness with weighted-decoding baselines.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below pin the
//! `f32` instantiation used for inference and checkpoints.

pub mod attribute;
pub mod autodiff;
pub mod error;
pub mod eval;
pub mod lm;
pub mod metrics;
pub mod optim;
pub mod scalar;
pub mod steer;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type History32 = lm::History<f32>;
pub type Lm = lm::TransformerLm<f32>;
