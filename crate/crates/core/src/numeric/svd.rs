//! One-sided Jacobi SVD for the small dense matrices used here (≤ 64×64).

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

#[derive(Debug, Clone)]
pub struct Svd {
    /// `rows × p` with orthonormal columns, `p = min(rows, cols)`.
    pub u: Matrix,
    /// Descending, length `p`.
    pub singular_values: Vec<f64>,
    /// `cols × p` with orthonormal columns.
    pub v: Matrix,
}

/// Thin SVD `a = u · diag(s) · vᵀ`.
pub fn svd(a: &Matrix) -> Result<Svd> {
    if a.is_empty() {
        return Err(Error::dim("svd", "non-empty matrix", "0 entries"));
    }
    // Work on the orientation with at least as many rows as columns.
    if a.rows() < a.cols() {
        let t = svd(&a.transpose())?;
        return Ok(Svd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        });
    }
    let (m, n) = a.shape();
    // Columns stored contiguously for the rotations.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (super::matrix::norm(c), j))
        .collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));

    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    let mut singular_values = Vec::with_capacity(n);
    for (k, (sigma, j)) in order.into_iter().enumerate() {
        singular_values.push(sigma);
        if sigma > 0.0 {
            let unit: Vec<f64> = cols[j].iter().map(|x| x / sigma).collect();
            u.set_column(k, &unit);
        }
        v.set_column(k, &vcols[j]);
    }
    Ok(Svd {
        u,
        singular_values,
        v,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// `C ≈ S · T` with `S: rows × r`, `T: r × cols`.
#[derive(Debug, Clone)]
pub struct RankFactor {
    pub s: Matrix,
    pub t: Matrix,
    pub singular_values: Vec<f64>,
    /// Number of singular values above `1e-10 · σ_max`.
    pub numerical_rank: usize,
    /// `‖C − S·T‖_F`, i.e. the Frobenius norm of the discarded tail.
    pub residual: f64,
}

impl RankFactor {
    pub fn is_exact(&self) -> bool {
        self.numerical_rank <= self.s.cols()
    }
}

pub const RANK_TOLERANCE: f64 = 1e-10;

/// Splits `C` into rank-`r` factors by balancing the singular values
/// between both sides. When `rank(C) ≤ r` the product reproduces `C`;
/// otherwise it is the best rank-`r` approximation and `residual` reports
/// what was dropped.
pub fn rank_r_factor(c: &Matrix, r: usize) -> Result<RankFactor> {
    if r == 0 {
        return Err(Error::Config("rank_r_factor needs r >= 1".into()));
    }
    let dec = svd(c)?;
    let (rows, cols) = c.shape();
    let sigma_max = dec.singular_values.first().copied().unwrap_or(0.0);
    let numerical_rank = dec
        .singular_values
        .iter()
        .filter(|s| **s > RANK_TOLERANCE * sigma_max && **s > 0.0)
        .count();
    let keep = r.min(dec.singular_values.len());
    let mut s = Matrix::zeros(rows, r);
    let mut t = Matrix::zeros(r, cols);
    for k in 0..keep {
        let root = dec.singular_values[k].sqrt();
        for i in 0..rows {
            s.set(i, k, dec.u.get(i, k) * root);
        }
        for j in 0..cols {
            t.set(k, j, dec.v.get(j, k) * root);
        }
    }
    let residual = dec.singular_values[keep..]
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    Ok(RankFactor {
        s,
        t,
        singular_values: dec.singular_values,
        numerical_rank,
        residual,
    })
}
