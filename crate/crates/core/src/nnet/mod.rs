//! Hand-written tensor kernels with explicit backward passes.

pub mod gradcheck;
pub mod io;
mod ops;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{gradient_check, GradProbe, GradReport};
pub use ops::{
    channel_argmax, channel_max, channel_max_backward, conv1x1, conv1x1_backward, conv2d, conv2d_backward, dense,
    dense_backward, pointwise_mul, pointwise_mul_backward, vi_module, vi_module_backward, ViTrace,
};
pub use optim::{Adam, AdamConfig};
pub use params::LayerParams;
pub use tensor::{Shape, Tensor};
