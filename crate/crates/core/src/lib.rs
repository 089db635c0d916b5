//! Decorrelated backpropagation for masked-autoencoder pre-training of vision
//! transformers.
//!
//! Every decorrelated linear layer learns a square matrix `R` that whitens its
//! input alongside ordinary gradient training of `W`; at checkpoint time `W R`
//! is fused into a single weight.

pub mod data;
pub mod decorr;
pub mod error;
pub mod harness;
pub mod mae;
pub mod nn;
pub mod optim;

pub use error::{DbpError, Result};
