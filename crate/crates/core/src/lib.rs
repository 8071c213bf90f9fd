//! Full-model instance-adaptive neural image compression.
//!
//! A small mean-scale hyperprior codec is finetuned on a set of frames. The
//! receiver-side parameter updates are quantized onto a uniform grid, coded
//! under a spike-and-slab prior and shipped in the same bitstream as the
//! latents, so the receiver can rebuild the adapted decoder before decoding
//! the frames.

pub mod autodiff;
pub mod bitstream;
pub mod checkpoint;
pub mod entropy;
pub mod error;
pub mod gauss;
pub mod io;
pub mod model;
pub mod prior;
pub mod quant;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
