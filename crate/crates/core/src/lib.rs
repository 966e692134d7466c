//! Desk-scale laboratory for cross-resolution diffusion pruning: a small
//! trainable-from-scratch DDPM over procedural patterns, block-wise magnitude
//! pruning with a simulated-annealing ratio search, and pruned-output
//! amplification during sampling.

pub mod amplify;
pub mod anneal;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod ops;
pub mod pgm;
pub mod prune;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Tensor, TensorOf};
