//! Noise-mask pretraining with a policy-gradient mask sampler.
//!
//! A small policy network maps each (preprocessed) image to Beta parameter
//! maps, a noise matrix is sampled from them, upsampled and blurred into a
//! multiplicative mask, and the masked image is classified. The classifier
//! learns from cross-entropy; the policy learns from the REINFORCE loss.
//! The resulting "heated" classifier is then fine-tuned without masks.

pub mod data;
pub mod config;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod gradsuite;
pub mod mask;
pub mod networks;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Graph, Tensor, Var};
