//! Differentiable numerical kernels.
//!
//! Each kernel has an optimized forward, a hand-written backward, and a
//! naive counterpart in [`crate::reference`] used as a test oracle.

mod activation;
mod conv;
mod norm;
mod pool;

pub use activation::{leaky_relu, leaky_relu_backward, softmax, softmax_backward, LEAKY_SLOPE};
pub use conv::{
    conv2d, conv3d, conv_backward, conv_transpose3d, conv_transpose3d_backward, Conv2dSpec,
    Conv3dSpec, ConvGrads, ConvSpec,
};
pub use norm::{
    instance_norm2d, instance_norm2d_backward, instance_norm2d_forward, InstanceNormCache,
};
pub use pool::{spatial_subsample, spatial_subsample_backward};
