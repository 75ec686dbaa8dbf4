//! Multimodal emotion recognition with adversarial encoders, cross-modal
//! gating and multi-head fusion.

pub mod aae;
pub mod cgmm;
pub mod config;
pub mod data;
pub mod ffm;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tensor::{Result, Tensor, TensorError};
