use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L2Estimate {
    /// `sqrt(mean ‖f(X) − g(X)‖²)`.
    pub distance: f64,
    /// Delta-method standard error of `distance`.
    pub std_err: f64,
    pub mean_square: f64,
    pub mean_square_se: f64,
    pub samples: usize,
}

/// Monte-Carlo `‖f − g‖_{L²(μ)}` with `μ` uniform on the ball of radius
/// `x_max` in `ℝ^d`.
pub fn l2_distance_mc<F, G>(
    f: F,
    g: G,
    d: usize,
    x_max: f64,
    samples: usize,
    seed: u64,
) -> Result<L2Estimate>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if samples == 0 {
        return Err(Error::Config("l2_distance_mc needs samples >= 1".into()));
    }
    let mut rng = SeededRng::with_stream(seed, 3);
    let mut sq = Vec::with_capacity(samples);
    for _ in 0..samples {
        let x = rng.uniform_ball(d, x_max);
        let (a, b) = (f(&x)?, g(&x)?);
        if a.len() != b.len() {
            return Err(Error::dim("l2_distance_mc", a.len(), b.len()));
        }
        sq.push(a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>());
    }
    let n = samples as f64;
    let mean = sq.iter().sum::<f64>() / n;
    let var = if samples > 1 {
        sq.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let mean_square_se = (var / n).sqrt();
    let distance = mean.sqrt();
    let std_err = if distance > 0.0 {
        mean_square_se / (2.0 * distance)
    } else {
        0.0
    };
    Ok(L2Estimate {
        distance,
        std_err,
        mean_square: mean,
        mean_square_se,
        samples,
    })
}
