//! Exact gradients of the τ-stabilized weight map.
//!
//! Everything is applied column by column: with `n_j = ‖W′_{:,j}‖` and
//! `s_j = n_j + τ`, the map `w ↦ m_j · w / s_j` has gradient
//! `(m_j/s_j)·G⊥ + (m_j τ/s_j²)·G∥`, where `G∥` is the projection of the
//! upstream column onto `W′_{:,j}` and `G⊥` the remainder.

mod backprop;
mod check;
mod fd;
mod oracle;
mod pde;

pub use backprop::{backprop_adapter, GradBundle, HyperGrads};
pub use check::{
    adapter_params, read_param, run_grad_check, write_param, GradCheckConfig, GradCheckReport,
    ParamId, ParamReport,
};
pub use fd::{finite_diff, finite_diff_step, relative_error, FD_REL_STEP};
pub use oracle::DdOracle;
pub use pde::{pde_grad, pde_inner_product, pde_loss, PdeProbe};

use crate::error::{Error, Result};
use crate::numeric::{column_norms, dot, sigmoid, Matrix};

/// Relative tolerance on the agreement of the two algebraic gradient forms.
pub const FORM_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSplit {
    pub g_perp: Matrix,
    pub g_par: Matrix,
}

/// Per-column split of `g` into the part along `W′_{:,j}` and the rest. A zero
/// column of `W′` has no direction: `G∥ = 0` there.
pub fn split_parallel_orthogonal(g: &Matrix, wp: &Matrix) -> Result<ColumnSplit> {
    g.same_shape(wp, "split_parallel_orthogonal")?;
    let mut g_par = Matrix::zeros(g.rows(), g.cols());
    for j in 0..g.cols() {
        let w = wp.column(j);
        let nn = dot(&w, &w);
        if nn > 0.0 {
            let coef = dot(&g.column(j), &w) / nn;
            let col: Vec<f64> = w.iter().map(|x| coef * x).collect();
            g_par.set_column(j, &col);
        }
    }
    let g_perp = g.sub(&g_par)?;
    Ok(ColumnSplit { g_perp, g_par })
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("tau must be finite and > 0, got {tau}")));
    }
    Ok(())
}

/// Orthogonal/parallel form of `∂L/∂W′`.
pub fn grad_wprime_decomposed(g: &Matrix, wp: &Matrix, m: &[f64], tau: f64) -> Result<Matrix> {
    check_tau(tau)?;
    if m.len() != wp.cols() {
        return Err(Error::dim("grad_wprime", wp.cols(), m.len()));
    }
    let split = split_parallel_orthogonal(g, wp)?;
    let norms = column_norms(wp)?;
    let mut out = Matrix::zeros(g.rows(), g.cols());
    for j in 0..g.cols() {
        let s = norms[j] + tau;
        let a = m[j] / s;
        let b = m[j] * tau / (s * s);
        let perp = split.g_perp.column(j);
        let par = split.g_par.column(j);
        let col: Vec<f64> = perp.iter().zip(&par).map(|(p, q)| a * p + b * q).collect();
        out.set_column(j, &col);
    }
    Ok(out)
}

/// Direct chain-rule form `m_j [G/s − ⟨G, W′⟩ W′ / (s² n)]`, with the second
/// term taken as its limit 0 on a zero column.
pub fn grad_wprime_chain(g: &Matrix, wp: &Matrix, m: &[f64], tau: f64) -> Result<Matrix> {
    check_tau(tau)?;
    g.same_shape(wp, "grad_wprime")?;
    if m.len() != wp.cols() {
        return Err(Error::dim("grad_wprime", wp.cols(), m.len()));
    }
    let norms = column_norms(wp)?;
    let mut out = Matrix::zeros(g.rows(), g.cols());
    for j in 0..g.cols() {
        let n = norms[j];
        let s = n + tau;
        let gc = g.column(j);
        let w = wp.column(j);
        let coef = if n > 0.0 {
            dot(&gc, &w) / (s * s * n)
        } else {
            0.0
        };
        let col: Vec<f64> = gc
            .iter()
            .zip(&w)
            .map(|(gi, wi)| m[j] * (gi / s - coef * wi))
            .collect();
        out.set_column(j, &col);
    }
    Ok(out)
}

/// `∂L/∂W′` given the upstream `G = ∂L/∂W`. Both algebraic forms are
/// evaluated; they must agree to [`FORM_TOLERANCE`] relative to
/// [`form_scale`].
pub fn grad_wprime(g: &Matrix, wp: &Matrix, m: &[f64], tau: f64) -> Result<Matrix> {
    let decomposed = grad_wprime_decomposed(g, wp, m, tau)?;
    let chain = grad_wprime_chain(g, wp, m, tau)?;
    let discrepancy = form_discrepancy(&decomposed, &chain, g, wp, m, tau)?;
    if discrepancy > FORM_TOLERANCE {
        return Err(Error::InternalConsistency {
            op: "grad_wprime",
            discrepancy,
            tolerance: FORM_TOLERANCE,
        });
    }
    Ok(decomposed)
}

/// Largest per-column term magnitude `|m_j| ‖G_{:,j}‖ / (n_j + τ)`. The two
/// forms cancel terms of this size, so their rounding error scales with it
/// rather than with the (possibly much smaller) result.
pub fn form_scale(g: &Matrix, wp: &Matrix, m: &[f64], tau: f64) -> Result<f64> {
    let norms = column_norms(wp)?;
    let gn = column_norms(g)?;
    Ok((0..g.cols())
        .map(|j| m[j].abs() * gn[j] / (norms[j] + tau))
        .fold(0.0, f64::max))
}

/// `max |decomposed − chain| / form_scale`.
pub fn form_discrepancy(
    decomposed: &Matrix,
    chain: &Matrix,
    g: &Matrix,
    wp: &Matrix,
    m: &[f64],
    tau: f64,
) -> Result<f64> {
    let scale = form_scale(g, wp, m, tau)?;
    let diff = decomposed.max_abs_diff(chain)?;
    Ok(if diff == 0.0 { 0.0 } else { diff / scale.max(f64::MIN_POSITIVE) })
}

/// `∂L/∂m_j = ⟨G_{:,j}, W′_{:,j}⟩ / (n_j + τ)`.
pub fn grad_m(g: &Matrix, wp: &Matrix, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    g.same_shape(wp, "grad_m")?;
    let norms = column_norms(wp)?;
    Ok((0..g.cols())
        .map(|j| dot(&g.column(j), &wp.column(j)) / (norms[j] + tau))
        .collect())
}

/// `∂L/∂τ = −Σ_j m_j ⟨G_{:,j}, W′_{:,j}⟩ / (n_j + τ)²`.
pub fn grad_tau(g: &Matrix, wp: &Matrix, m: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    g.same_shape(wp, "grad_tau")?;
    if m.len() != wp.cols() {
        return Err(Error::dim("grad_tau", wp.cols(), m.len()));
    }
    let norms = column_norms(wp)?;
    Ok(-(0..g.cols())
        .map(|j| {
            let s = norms[j] + tau;
            m[j] * dot(&g.column(j), &wp.column(j)) / (s * s)
        })
        .sum::<f64>())
}

/// Chain rule through `τ = softplus(tau_raw)`.
pub fn grad_tau_raw(dtau: f64, tau_raw: f64) -> f64 {
    dtau * sigmoid(tau_raw)
}
