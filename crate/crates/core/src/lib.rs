//! Core of the pneumonia classifier toolkit: a small dense tensor engine with
//! reverse-mode differentiation, the layer set needed for CNN / ViT / hybrid
//! CNN-ViT binary classifiers, a deterministic training loop, evaluation
//! metrics and the complexity / scaling analysis helpers.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled. Everything touching the filesystem lives in the companion
//! `pneumovit` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::unnecessary_cast)]

extern crate alloc;

pub mod analysis;
pub mod autograd;
pub mod data;
mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod models;
mod real;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;

/// Seeded generator used by every randomized operation in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's generator from an integer seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// Train / inference switch shared by dropout, batch normalization and the
/// models built from them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}
