use serde::{Deserialize, Serialize};

use super::matrix::{dot, norm, Matrix};
use crate::error::{Error, Result};

/// Euclidean norm of every column.
pub fn column_norms(w: &Matrix) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(Error::dim("column_norms", "non-empty matrix", "0 entries"));
    }
    Ok((0..w.cols()).map(|j| norm(&w.column(j))).collect())
}

/// `Trace(A^T B)`.
pub fn frobenius_inner(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.same_shape(b, "frobenius_inner")?;
    Ok(dot(a.as_slice(), b.as_slice()))
}

/// Numerically stable softmax of a vector (max-shifted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let s = softmax(m.row(i));
        for (j, v) in s.into_iter().enumerate() {
            out.set(i, j, v);
        }
    }
    out
}

const TANH_EDGE: f64 = 1.0 - 1e-12;

fn check_slope(slope: f64) -> Result<()> {
    if !(slope > 0.0 && slope < 1.0) {
        return Err(Error::Config(format!(
            "leaky-relu slope must lie in (0, 1), got {slope}"
        )));
    }
    Ok(())
}

pub fn leaky_relu(m: &Matrix, slope: f64) -> Result<Matrix> {
    check_slope(slope)?;
    Ok(m.map(|x| if x >= 0.0 { x } else { slope * x }))
}

/// Elementwise nonlinearities used by the hypernetwork and the shared
/// regression model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Tanh,
    Identity,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: 0.01 }
    }
}

impl Activation {
    pub fn validate(&self) -> Result<()> {
        match self {
            Activation::LeakyRelu { slope } => check_slope(*slope),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    /// Preimage of `y`. `tanh` clamps `|y|` below `1 − 1e-12`.
    #[inline]
    pub fn inverse(&self, y: f64) -> f64 {
        match *self {
            Activation::LeakyRelu { slope } => {
                if y >= 0.0 {
                    y
                } else {
                    y / slope
                }
            }
            Activation::Tanh => y.clamp(-TANH_EDGE, TANH_EDGE).atanh(),
            Activation::Identity => y,
        }
    }

    pub fn forward(&self, m: &Matrix) -> Matrix {
        m.map(|x| self.apply(x))
    }

    pub fn backward(&self, pre: &Matrix, upstream: &Matrix) -> Result<Matrix> {
        upstream.hadamard(&pre.map(|x| self.derivative(x)))
    }

    /// Parses `leaky-relu`, `leaky-relu:0.05`, `tanh` or `identity`.
    pub fn parse(tag: &str) -> Result<Self> {
        let tag = tag.trim().to_ascii_lowercase();
        let act = match tag.as_str() {
            "tanh" => Activation::Tanh,
            "identity" | "linear" => Activation::Identity,
            "leaky-relu" | "leaky_relu" => Activation::default(),
            other => {
                if let Some(s) = other
                    .strip_prefix("leaky-relu:")
                    .or_else(|| other.strip_prefix("leaky_relu:"))
                {
                    let slope = s
                        .parse()
                        .map_err(|_| Error::Config(format!("bad leaky-relu slope {s:?}")))?;
                    Activation::LeakyRelu { slope }
                } else {
                    return Err(Error::Config(format!("unsupported activation {other:?}")));
                }
            }
        };
        act.validate()?;
        Ok(act)
    }

    pub fn tag(&self) -> String {
        match self {
            Activation::LeakyRelu { slope } => format!("leaky-relu:{slope}"),
            Activation::Tanh => "tanh".into(),
            Activation::Identity => "identity".into(),
        }
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    // ln(e^y - 1) = y + ln(1 - e^-y)
    y + (-(-y).exp()).ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
