//! Adversarial uniformity regularization for embedding spaces.
//!
//! The library trains an auxiliary discriminator to tell a network's
//! embeddings apart from samples of a target prior (a uniform hypercube by
//! default) and feeds the fooling signal back into the task model, pulling
//! the embedding distribution toward the prior while the task loss is
//! optimized. Alongside the regularizer it provides:
//!
//! - a minimal reverse-mode autodiff tape over dense `f64` tensors,
//! - feed-forward networks, Adam/SGD, and bit-exact checkpoints,
//! - prior samplers (uniform hypercube, isotropic Gaussians),
//! - task losses (softmax classification, prototypical episodes,
//!   contrastive pairs) and synthetic domain-shift data generators,
//! - uniformity diagnostics (per-dimension KS, hypercube occupancy,
//!   nearest-neighbor entropy, adversarial probe) and retrieval metrics
//!   (Recall@1, NMI),
//! - a seeded experiment harness with deterministic, replayable runs.

pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod nn;
pub mod priors;
pub mod regularizer;
pub mod rng;
pub mod tape;
pub mod tasks;
pub mod tensor;

pub use error::{Result, UniregError};
pub use tensor::Tensor;
