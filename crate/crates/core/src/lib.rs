//! Weakly-supervised change detection from image-level labels.
//!
//! A siamese hierarchical transformer encoder feeds a difference module, a
//! class-activation head that yields change maps, a dilated decoder trained on
//! label-gated pseudo labels, and a label-gated penalty on mispredicted change
//! presence. Everything runs on a small reverse-mode autograd engine in `f64`.

pub mod autograd;
pub mod cam;
pub mod data;
pub mod decoder;
pub mod difference;
pub mod encoder;
pub mod harness;
pub mod error;
pub mod lg;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use mask::BinaryMask;
pub use tensor::Tensor;
