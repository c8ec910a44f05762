//! Desk-scale video action classifier: segment-based clip sampling,
//! consensus training of a small 3D CNN, and a five-stage compression
//! pipeline (sparsify, fine-tune, prune, quantize, Huffman-code) with a
//! sparse inference engine and a benchmark harness.

pub mod consensus;
pub mod dataset;
pub mod error;
pub mod flops;
#[cfg(test)]
pub(crate) mod gradcheck;
pub mod bits;
pub mod csc;
pub mod huffman;
pub mod layers;
pub mod linalg;
pub mod network;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
