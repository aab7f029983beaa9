//! Deterministic single-process simulator of federated spectrogram-classifier
//! training under data poisoning, with a server-side reserve-set defense and
//! a numerical verifier for the round-wise contraction bound.

pub mod attack;
pub mod data;
pub mod defense;
pub mod error;
pub mod fed;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod rng;
pub mod signal;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use tensor::Tensor;
