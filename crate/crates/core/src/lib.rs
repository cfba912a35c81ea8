//! Mixture-of-experts visual saliency prediction.
//!
//! A shared convolutional trunk feeds `K` expert heads. Each expert map is
//! modulated by a trainable per-category center-bias grid and the results are
//! blended by a temperature-softened gating classifier:
//!
//! ```text
//! saliency(i) = sum_k expert_k(i) * bias_k(i) * softmax(logits / tau)_k
//! ```
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`autodiff`]), the model and its losses ([`model`]), Adadelta training
//! ([`optim`]), a synthetic category-structured dataset ([`dataset`]) and the
//! usual fixation-based saliency metrics ([`metrics`]).

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
