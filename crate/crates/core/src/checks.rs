//! Randomized probes of the closed-form identities: the two gradient forms,
//! the τ limits of the weight map, the gate-logit orthogonality and the
//! attention/mixture-of-experts equivalence.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::{dora_weight, lora_weight, normalize_columns, relative_distance};
use crate::error::{Error, Result};
use crate::gradients::{
    form_discrepancy, grad_wprime_chain, grad_wprime_decomposed, pde_inner_product,
};
use crate::moe::{head_post_direct, head_post_moe, AdaptedProjection, HeadParams};
use crate::numeric::{column_norms, SeededRng};

/// Outcome of one probe family. `worst` is the largest observed
/// `value / bound`; the family passes when every trial is below its bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub trials: usize,
    pub violations: usize,
    pub worst: f64,
    pub worst_trial: usize,
    /// What `worst` measures.
    pub criterion: String,
}

impl ProbeSummary {
    fn new(trials: usize, criterion: &str) -> Self {
        Self {
            trials,
            violations: 0,
            worst: 0.0,
            worst_trial: 0,
            criterion: criterion.into(),
        }
    }

    fn record(&mut self, trial: usize, value: f64, bound: f64) {
        let ratio = value / bound;
        if !(value < bound) {
            self.violations += 1;
        }
        if ratio > self.worst || ratio.is_nan() {
            self.worst = ratio;
            self.worst_trial = trial;
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

fn uniform_dim(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Decomposed versus chain-rule `∂L/∂W′`, measured by
/// [`form_discrepancy`]. Every third trial zeroes one column of `W′` and
/// every third shrinks one to norm `1e-12`.
pub fn probe_gradient_forms(trials: usize, seed: u64, tol: f64) -> Result<ProbeSummary> {
    let root = SeededRng::new(seed);
    let mut out = ProbeSummary::new(trials, "form discrepancy / tol");
    for t in 0..trials {
        let mut rng = root.derive(t as u64);
        let (d, k) = (uniform_dim(&mut rng, 1, 16), uniform_dim(&mut rng, 1, 16));
        let g = rng.gaussian_matrix(d, k, 1.0);
        let mut wp = rng.gaussian_matrix(d, k, 1.0);
        let m: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.1, 3.0)).collect();
        let tau = (rng.uniform_range(-3.0, 1.0) * std::f64::consts::LN_10).exp();
        let col = rng.below(k);
        let shrink = match t % 3 {
            1 => Some(0.0),
            2 => Some(1e-12),
            _ => None,
        };
        if let Some(target) = shrink {
            let c = wp.column(col);
            let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scaled: Vec<f64> = c.iter().map(|v| v * target / n).collect();
            wp.set_column(col, &scaled);
        }
        let dec = grad_wprime_decomposed(&g, &wp, &m, tau)?;
        let chain = grad_wprime_chain(&g, &wp, &m, tau)?;
        out.record(t, form_discrepancy(&dec, &chain, &g, &wp, &m, tau)?, tol);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeLimits {
    /// `‖W(τ=τ_small) − DoRA‖ / ‖DoRA‖` against `small_tol`.
    pub small_tau: ProbeSummary,
    /// `‖W(τ=τ_large) − (m/τ)W′‖ / ‖(m/τ)W′‖` against `2 max_j n_j / τ`.
    pub large_tau: ProbeSummary,
}

/// τ limits of the stabilized map on instances whose adapted columns all
/// have norm at least `0.1`.
pub fn probe_regime_limits(
    trials: usize,
    seed: u64,
    tau_small: f64,
    tau_large: f64,
    small_tol: f64,
) -> Result<RegimeLimits> {
    let root = SeededRng::new(seed);
    let mut small = ProbeSummary::new(trials, "relative distance to DoRA / tol");
    let mut large = ProbeSummary::new(trials, "relative distance to linear / (2 max n_j / tau)");
    for t in 0..trials {
        let mut rng = root.derive(t as u64);
        let (d, k) = (uniform_dim(&mut rng, 2, 16), uniform_dim(&mut rng, 2, 16));
        let r = uniform_dim(&mut rng, 1, 4.min(d).min(k));
        let (w0, b, a, wp) = loop {
            let w0 = rng.gaussian_matrix(d, k, 1.0);
            let b = rng.gaussian_matrix(d, r, 0.5);
            let a = rng.gaussian_matrix(r, k, 0.5);
            let wp = lora_weight(&w0, &b, &a)?;
            if column_norms(&wp)?.iter().all(|n| *n >= 0.1) {
                break (w0, b, a, wp);
            }
        };
        let m: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.1, 3.0)).collect();
        let dora = dora_weight(&w0, &b, &a, &m)?;
        let near = normalize_columns(&wp, &m, tau_small)?;
        small.record(t, relative_distance(&near, &dora)?, small_tol);

        let linear = wp.scale_columns(&m.iter().map(|mj| mj / tau_large).collect::<Vec<_>>())?;
        let far = normalize_columns(&wp, &m, tau_large)?;
        let max_norm = column_norms(&wp)?.into_iter().fold(0.0, f64::max);
        large.record(t, relative_distance(&far, &linear)?, 2.0 * max_norm / tau_large);
    }
    Ok(RegimeLimits {
        small_tau: small,
        large_tau: large,
    })
}

/// `|⟨C_Q + Z, ∂L/∂Z⟩| < tol · max(1, |L|)` for the normalized gate logit.
pub fn probe_pde(trials: usize, seed: u64, max_dim: usize, tol: f64) -> Result<ProbeSummary> {
    let root = SeededRng::new(seed);
    let mut out = ProbeSummary::new(trials, "|<C_Q+Z, dL/dZ>| / (tol max(1,|L|))");
    for t in 0..trials {
        let mut rng = root.derive(t as u64);
        let d = uniform_dim(&mut rng, 1, max_dim);
        let c_q = rng.gaussian_matrix(d, d, 1.0);
        let c_k = rng.gaussian_matrix(d, d, 1.0);
        let z = rng.gaussian_matrix(d, d, 0.5);
        let x = rng.uniform_ball(d, 1.0);
        let m_q = rng.uniform_range(0.1, 2.0);
        let p = pde_inner_product(&c_q, &z, &c_k, m_q, &x)?;
        out.record(t, p.inner.abs(), tol * p.loss.abs().max(1.0));
    }
    Ok(out)
}

fn random_head(rng: &mut SeededRng, d: usize, d_h: usize) -> HeadParams {
    let r = uniform_dim(rng, 1, d.min(d_h));
    let adapted = |rng: &mut SeededRng| AdaptedProjection {
        b: rng.gaussian_matrix(d, r, 0.5),
        a: rng.gaussian_matrix(r, d_h, 0.5),
        m: rng.uniform_range(0.5, 2.0),
    };
    let q = adapted(rng);
    let v = adapted(rng);
    HeadParams {
        w_q: rng.gaussian_matrix(d, d_h, 1.0),
        w_k: rng.gaussian_matrix(d, d_h, 1.0),
        w_v: rng.gaussian_matrix(d, d_h, 1.0),
        q,
        v,
    }
}

/// Max elementwise gap between direct attention and its mixture-of-experts
/// form, for `N ≤ max_tokens`, `d ≤ max_dim`, `d_h ≤ max_head`.
pub fn probe_moe_equivalence(
    trials: usize,
    seed: u64,
    limits: [usize; 3],
    tol: f64,
) -> Result<ProbeSummary> {
    let [max_tokens, max_dim, max_head] = limits;
    let root = SeededRng::new(seed);
    let mut out = ProbeSummary::new(trials, "max |direct - moe| / tol");
    for t in 0..trials {
        let mut rng = root.derive(t as u64);
        let n = uniform_dim(&mut rng, 1, max_tokens);
        let d = uniform_dim(&mut rng, 1, max_dim);
        let d_h = uniform_dim(&mut rng, 1, max_head);
        let hp = random_head(&mut rng, d, d_h);
        let x = rng.gaussian_matrix(n, d, 1.0);
        let gap = head_post_direct(&x, &hp)?.max_abs_diff(&head_post_moe(&x, &hp)?)?;
        out.record(t, gap, tol);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentityCheckConfig {
    pub seed: u64,
    pub form_trials: usize,
    pub form_tol: f64,
    pub limit_trials: usize,
    pub tau_small: f64,
    pub tau_large: f64,
    pub small_tau_tol: f64,
    pub pde_trials: usize,
    pub pde_max_dim: usize,
    pub pde_tol: f64,
    pub moe_trials: usize,
    pub moe_max_tokens: usize,
    pub moe_max_dim: usize,
    pub moe_max_head: usize,
    pub moe_tol: f64,
}

impl Default for IdentityCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            form_trials: 1000,
            form_tol: 1e-10,
            limit_trials: 1000,
            tau_small: 1e-12,
            tau_large: 1e6,
            small_tau_tol: 1e-8,
            pde_trials: 1000,
            pde_max_dim: 8,
            pde_tol: 1e-10,
            moe_trials: 200,
            moe_max_tokens: 8,
            moe_max_dim: 8,
            moe_max_head: 4,
            moe_tol: 1e-12,
        }
    }
}

impl IdentityCheckConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.form_trials == 0 || self.limit_trials == 0 || self.pde_trials == 0 || self.moe_trials == 0 {
            return bad("every probe needs trials >= 1");
        }
        if [self.form_tol, self.small_tau_tol, self.pde_tol, self.moe_tol]
            .iter()
            .any(|t| !(*t > 0.0))
        {
            return bad("tolerances must be > 0");
        }
        if !(self.tau_small > 0.0 && self.tau_large > self.tau_small && self.tau_large.is_finite()) {
            return bad("need 0 < tau_small < tau_large < inf");
        }
        if self.pde_max_dim == 0 || self.moe_max_tokens == 0 || self.moe_max_dim == 0 || self.moe_max_head == 0 {
            return bad("dimension limits must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub config: IdentityCheckConfig,
    pub probes: BTreeMap<String, ProbeSummary>,
    pub passed: bool,
}

/// All four probe families, each on its own stream of `cfg.seed`.
pub fn run_identity_check(cfg: &IdentityCheckConfig) -> Result<IdentityReport> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    let sub = |i: u64| root.derive(i).next_u64();
    let mut probes = BTreeMap::new();
    probes.insert(
        "gradient_forms".to_string(),
        probe_gradient_forms(cfg.form_trials, sub(0), cfg.form_tol)?,
    );
    let limits = probe_regime_limits(cfg.limit_trials, sub(1), cfg.tau_small, cfg.tau_large, cfg.small_tau_tol)?;
    probes.insert("tau_limit_dora".to_string(), limits.small_tau);
    probes.insert("tau_limit_linear".to_string(), limits.large_tau);
    probes.insert(
        "pde_orthogonality".to_string(),
        probe_pde(cfg.pde_trials, sub(2), cfg.pde_max_dim, cfg.pde_tol)?,
    );
    probes.insert(
        "moe_equivalence".to_string(),
        probe_moe_equivalence(
            cfg.moe_trials,
            sub(3),
            [cfg.moe_max_tokens, cfg.moe_max_dim, cfg.moe_max_head],
            cfg.moe_tol,
        )?,
    );
    let passed = probes.values().all(ProbeSummary::passed);
    Ok(IdentityReport {
        config: cfg.clone(),
        probes,
        passed,
    })
}
