//! A deliberately small differentiable operator set.
//!
//! There is no autodiff graph: each operator has a hand-written backward
//! function, and models compose them explicitly. Everything is generic over
//! [`Real`] so the same code runs in `f32` for training and inference and in
//! `f64` for finite-difference verification.

mod adam;
pub mod gradcheck;
mod ops;
mod tensor;
mod weights;

pub use adam::{AdamConfig, Param, ParamStore};
pub use ops::{
    conv2d, conv2d_backward, depthwise_corr, depthwise_corr_backward, pixel_shuffle,
    pixel_unshuffle, pointwise_conv, pointwise_conv_backward, relu, relu_backward, sigmoid,
    sigmoid_backward, tanh, tanh_backward, Conv2dGrads,
};
pub use tensor::{Real, Tensor4};
pub use weights::{read_weight_file, write_weight_file, NamedTensor, WeightFile, FORMAT_VERSION};
