//! Dense linear algebra, reproducible randomness and elementwise maps.

mod dd;
mod matrix;
mod ops;
mod rng;
mod solve;
mod svd;

pub use dd::Dd;
pub use matrix::{dot, norm, Matrix};
pub use ops::{
    column_norms, frobenius_inner, leaky_relu, sigmoid, softmax, softmax_rows, softplus,
    softplus_inverse, Activation,
};
pub use rng::SeededRng;
pub use solve::{invert, solve_spd};
pub use svd::{rank_r_factor, svd, RankFactor, Svd, RANK_TOLERANCE};
