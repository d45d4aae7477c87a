//! Dilated cost volumes for optical flow: feature encoding, multi-dilation
//! cost volumes, 3D cost filtering, hypothesis fusion and convex upsampling,
//! with hand-written gradients and a small training loop.

pub mod cost_volume;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod flow;
pub mod kernels;
mod layers;
pub mod metrics;
pub mod params;
pub mod reference;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
