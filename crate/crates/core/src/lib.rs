//! Numerical laboratory for weight-decomposed low-rank adaptation with a
//! learnable denominator offset (τ) and hypernetwork-generated factors.
//!
//! * [`numeric`]: dense matrices, SVD, seeded randomness.
//! * [`adapters`]: LoRA, DoRA and τ-stabilized DoRA weight maps, hypernetwork.
//! * [`gradients`]: exact gradients, manual backprop, finite differences.
//! * [`moe`]: attention head as a mixture of experts, regression functions.
//! * [`estimation`]: data generation, least squares, Voronoi losses, sweeps.
//! * [`checks`]: randomized probes of the closed-form identities.

pub mod adapters;
pub mod checks;
pub mod gradients;
pub mod moe;
pub mod codec;
pub mod error;
pub mod estimation;
pub mod numeric;

pub use error::{Error, Result};
