use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{FrozenMatrices, MixingMeasure};
use crate::numeric::SeededRng;

/// `(X_i, Y_i)` pairs with `Y_i = f_*(X_i) + ε_i`, `ε_i ~ N(0, σ² I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionDataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub sigma: f64,
    pub seed: u64,
    pub x_max: f64,
}

impl RegressionDataset {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    /// First `n` samples.
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            x: self.x[..n.min(self.len())].to_vec(),
            y: self.y[..n.min(self.len())].to_vec(),
            ..self.clone()
        }
    }
}

/// Draws `X_i` uniformly from the ball of radius `x_max`. Inputs and noise use
/// separate streams of `seed`.
pub fn sample_dataset(
    truth: &MixingMeasure,
    frozen: &FrozenMatrices,
    n: usize,
    sigma: f64,
    seed: u64,
    x_max: f64,
) -> Result<RegressionDataset> {
    if n == 0 {
        return Err(Error::Config("dataset needs n >= 1".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    if !(x_max > 0.0 && x_max.is_finite()) {
        return Err(Error::Config(format!("x_max must be finite and > 0, got {x_max}")));
    }
    let d = frozen.d();
    let compiled = truth.compile(frozen)?;
    let mut xs = SeededRng::with_stream(seed, 1);
    let mut noise = SeededRng::with_stream(seed, 2);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let xi = xs.uniform_ball(d, x_max);
        let mut yi = compiled.eval(&xi)?;
        for v in &mut yi {
            *v += sigma * noise.standard_normal();
        }
        x.push(xi);
        y.push(yi);
    }
    Ok(RegressionDataset {
        x,
        y,
        sigma,
        seed,
        x_max,
    })
}
