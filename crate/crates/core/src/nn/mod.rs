//! Minimal CPU building blocks for the U-net: each layer caches what its
//! backward pass needs during a training-mode forward pass.
//!
//! Activations use channel-major `(C, N, H, W)` layout so that one channel
//! of a whole batch is contiguous and a convolution over the batch is a
//! single matrix product.

mod conv;
mod layers;
mod tensor;

pub use conv::Conv2d;
pub use layers::{BatchNorm2d, Dropout, MaxPool2, Relu, Upsample2};
pub use tensor::Tensor;

/// A trainable vector paired with its gradient from the last backward pass.
pub type ParamSlot<'a> = (&'a mut [f32], &'a [f32]);
