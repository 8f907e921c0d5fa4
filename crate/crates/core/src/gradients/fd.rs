use rayon::prelude::*;

use crate::error::{Error, Result};

/// Relative central-difference step: `ε_i = FD_REL_STEP · max(1, |θ_i|)`.
pub const FD_REL_STEP: f64 = 1e-5;

pub fn finite_diff_step(theta: f64, rel_step: f64) -> f64 {
    rel_step * theta.abs().max(1.0)
}

/// Central differences `(L(θ+ε_i e_i) − L(θ−ε_i e_i)) / 2ε_i`, one coordinate
/// per task.
pub fn finite_diff<F>(loss: &F, theta: &[f64], rel_step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if !(rel_step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {rel_step}")));
    }
    Ok((0..theta.len())
        .into_par_iter()
        .map(|i| {
            let eps = finite_diff_step(theta[i], rel_step);
            let mut probe = theta.to_vec();
            probe[i] = theta[i] + eps;
            let up = loss(&probe);
            probe[i] = theta[i] - eps;
            let down = loss(&probe);
            (up - down) / (2.0 * eps)
        })
        .collect())
}

/// `|a − b| / max(|a|, |b|)`, zero when `a = b`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}
