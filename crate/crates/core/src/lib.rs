//! Binary neural network training and deployment toolkit.
//!
//! The trainable parameter of every binary conv layer is a real-valued latent
//! weight `W`. During training the toolkit runs two forward paths through the
//! same architecture: the deployed binary path (`sign(W)` kernels with a
//! per-channel scale, `sign` activations) and a latent path (`W` kernels,
//! `hard_tanh` activations) that shares the affine BatchNorm coefficients but
//! keeps its own running statistics. The latent path is forward-only; it
//! supervises the binary path through representation-approximation losses on
//! the penultimate features. For deployment, binary kernels are bit-packed and
//! convolutions run as xnor + popcount, bit-exact against the float path.

pub mod binarize;
pub mod bitpack;
pub mod block;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod engine;
pub mod error;
pub mod layers;
pub mod losses;
pub mod models;
pub mod reference;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Element, Tensor};
