//! Participant-invariant representation learning.
//!
//! A 1D convolutional autoencoder whose latent space is pushed toward
//! subject invariance (kernel MMD between subjects, or a domain classifier
//! behind a gradient reversal layer), followed by supervised fine-tuning
//! with an optional triplet term.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! parallel trial execution live in the `pirl` companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analysis;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod models;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use rng::Rng;
pub use tensor::Tensor;
