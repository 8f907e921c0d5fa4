//! Scale invariance of the normalized gate logit.
//!
//! `L(Z) = exp(m · Xᵀ M C_K X / ‖M‖_F)` with `M = C_Q + Z` depends on `M` only
//! through its direction, so its gradient is orthogonal to `M`.

use crate::error::{Error, Result};
use crate::numeric::{dot, frobenius_inner, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct PdeProbe {
    pub loss: f64,
    pub grad: Matrix,
    /// `⟨C_Q + Z, ∂L/∂Z⟩`
    pub inner: f64,
}

struct Parts {
    m_mat: Matrix,
    norm: f64,
    kx: Vec<f64>,
    bilinear: f64,
}

fn parts(c_q: &Matrix, z: &Matrix, c_k: &Matrix, x: &[f64]) -> Result<Parts> {
    let d = c_q.rows();
    if c_q.shape() != (d, d) || c_k.shape() != (d, d) || x.len() != d {
        return Err(Error::dim(
            "pde_inner_product",
            format!("square C_Q, C_K of order {d} and X of length {d}"),
            format!("C_Q {:?}, C_K {:?}, X {}", c_q.shape(), c_k.shape(), x.len()),
        ));
    }
    let m_mat = c_q.add(z)?;
    let norm = m_mat.frobenius_norm();
    if norm == 0.0 {
        return Err(Error::Singularity {
            op: "pde_inner_product",
            detail: "C_Q + Z has zero Frobenius norm".into(),
        });
    }
    let kx = c_k.matvec(x)?;
    let bilinear = dot(x, &m_mat.matvec(&kx)?);
    Ok(Parts {
        m_mat,
        norm,
        kx,
        bilinear,
    })
}

pub fn pde_loss(c_q: &Matrix, z: &Matrix, c_k: &Matrix, m_q: f64, x: &[f64]) -> Result<f64> {
    let p = parts(c_q, z, c_k, x)?;
    Ok((m_q * p.bilinear / p.norm).exp())
}

/// `∂L/∂Z = L · m · [X (C_K X)ᵀ / ‖M‖ − (Xᵀ M C_K X) · M / ‖M‖³]`.
pub fn pde_grad(c_q: &Matrix, z: &Matrix, c_k: &Matrix, m_q: f64, x: &[f64]) -> Result<Matrix> {
    Ok(pde_inner_product(c_q, z, c_k, m_q, x)?.grad)
}

pub fn pde_inner_product(
    c_q: &Matrix,
    z: &Matrix,
    c_k: &Matrix,
    m_q: f64,
    x: &[f64],
) -> Result<PdeProbe> {
    let p = parts(c_q, z, c_k, x)?;
    let loss = (m_q * p.bilinear / p.norm).exp();
    let outer = Matrix::outer(x, &p.kx).scale(1.0 / p.norm);
    let radial = p.m_mat.scale(p.bilinear / p.norm.powi(3));
    let grad = outer.sub(&radial)?.scale(loss * m_q);
    let inner = frobenius_inner(&p.m_mat, &grad)?;
    Ok(PdeProbe { loss, grad, inner })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradients::{finite_diff, relative_error, FD_REL_STEP};
    use crate::numeric::SeededRng;

    #[test]
    fn identity_holds_on_random_instances() {
        let mut rng = SeededRng::new(1);
        for _ in 0..200 {
            let d = 1 + rng.below(8);
            let c_q = rng.gaussian_matrix(d, d, 1.0);
            let c_k = rng.gaussian_matrix(d, d, 1.0);
            let z = rng.gaussian_matrix(d, d, 0.5);
            let x = rng.uniform_ball(d, 1.0);
            let m = rng.uniform_range(0.1, 2.0);
            let p = pde_inner_product(&c_q, &z, &c_k, m, &x).unwrap();
            assert!(p.inner.abs() < 1e-10 * p.loss.abs().max(1.0));
        }
    }

    #[test]
    fn zero_perturbation_case() {
        let mut rng = SeededRng::new(2);
        let c_q = rng.gaussian_matrix(4, 4, 1.0);
        let c_k = rng.gaussian_matrix(4, 4, 1.0);
        let x = rng.uniform_ball(4, 1.0);
        let p = pde_inner_product(&c_q, &Matrix::zeros(4, 4), &c_k, 1.0, &x).unwrap();
        assert!(p.inner.abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(3);
        let d = 3;
        let c_q = rng.gaussian_matrix(d, d, 1.0);
        let c_k = rng.gaussian_matrix(d, d, 1.0);
        let z = rng.gaussian_matrix(d, d, 0.5);
        let x = rng.uniform_ball(d, 1.0);
        let g = pde_grad(&c_q, &z, &c_k, 1.3, &x).unwrap();
        let loss = |t: &[f64]| {
            let zz = Matrix::from_vec(d, d, t.to_vec()).unwrap();
            pde_loss(&c_q, &zz, &c_k, 1.3, &x).unwrap()
        };
        let fd = finite_diff(&loss, z.as_slice(), FD_REL_STEP).unwrap();
        for (a, n) in g.as_slice().iter().zip(&fd) {
            assert!(relative_error(*a, *n) < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn cancelling_perturbation_is_singular() {
        let c_q = Matrix::identity(2);
        let z = c_q.scale(-1.0);
        let err = pde_inner_product(&c_q, &z, &Matrix::identity(2), 1.0, &[1.0, 0.0]);
        assert!(matches!(err, Err(Error::Singularity { .. })));
    }
}
