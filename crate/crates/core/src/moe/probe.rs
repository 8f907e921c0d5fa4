//! Falsification probe for algebraic independence of `(B, A) ↦ σ₂(B)·σ₁(A)`.
//!
//! Each trial fixes a random target `(B₁, A₁)` and runs Levenberg–Marquardt
//! from an independent random start `(B₂, A₂)` on `½‖σ₂(B₂)σ₁(A₂) − σ₂(B₁)σ₁(A₁)‖²`.
//! A converged start that stays away from the target is a collision. Finding
//! none proves nothing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{solve_spd, Activation, Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub d: usize,
    pub r: usize,
    pub trials: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Collision threshold on `‖σ₂(B₂)σ₁(A₂) − σ₂(B₁)σ₁(A₁)‖_F`.
    pub residual_tol: f64,
    /// Minimum Euclidean distance between `(B₁, A₁)` and `(B₂, A₂)`.
    pub min_separation: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            d: 2,
            r: 2,
            trials: 100,
            seed: 0,
            max_iters: 300,
            residual_tol: 1e-8,
            min_separation: 1e-3,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.r == 0 || self.trials == 0 {
            return Err(Error::Config("probe needs d, r, trials >= 1".into()));
        }
        if !(self.residual_tol > 0.0 && self.min_separation > 0.0) {
            return Err(Error::Config("probe tolerances must be > 0".into()));
        }
        Ok(())
    }
}

/// Two distinct parameter points with (numerically) equal products.
/// Parameters are flattened as `B` then `A`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Collision {
    pub trial: usize,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub residual: f64,
    pub separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub sigma1: String,
    pub sigma2: String,
    pub config: ProbeConfig,
    pub collisions: Vec<Collision>,
    /// Smallest final residual over all trials.
    pub best_residual: f64,
}

impl ProbeReport {
    pub fn collision_found(&self) -> bool {
        !self.collisions.is_empty()
    }

    pub fn summary_lines(&self) -> Vec<String> {
        let mut out = vec![format!(
            "sigma1={} sigma2={} d={} r={} trials={} collisions={} best_residual={:.3e}",
            self.sigma1,
            self.sigma2,
            self.config.d,
            self.config.r,
            self.config.trials,
            self.collisions.len(),
            self.best_residual
        )];
        for c in &self.collisions {
            out.push(format!(
                "  trial {:>4}: residual {:.3e} separation {:.4} first {:?} second {:?}",
                c.trial, c.residual, c.separation, c.first, c.second
            ));
        }
        out
    }
}

pub fn check_assumptions_tags(sigma1: &str, sigma2: &str, cfg: &ProbeConfig) -> Result<ProbeReport> {
    check_assumptions(Activation::parse(sigma1)?, Activation::parse(sigma2)?, cfg)
}

pub fn check_assumptions(
    sigma1: Activation,
    sigma2: Activation,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    cfg.validate()?;
    sigma1.validate()?;
    sigma2.validate()?;
    let root = SeededRng::new(cfg.seed);
    let outcomes = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(t, &mut root.derive(t as u64), sigma1, sigma2, cfg))
        .collect::<Result<Vec<_>>>()?;
    let best_residual = outcomes.iter().map(|o| o.residual).fold(f64::INFINITY, f64::min);
    let collisions = outcomes
        .into_iter()
        .filter(|o| o.residual < cfg.residual_tol && o.separation > cfg.min_separation)
        .collect();
    Ok(ProbeReport {
        sigma1: sigma1.tag(),
        sigma2: sigma2.tag(),
        config: *cfg,
        collisions,
        best_residual,
    })
}

fn split(theta: &[f64], d: usize, r: usize) -> (Matrix, Matrix) {
    let b = Matrix::from_vec(d, r, theta[..d * r].to_vec()).expect("probe B shape");
    let a = Matrix::from_vec(r, d, theta[d * r..].to_vec()).expect("probe A shape");
    (b, a)
}

fn product(theta: &[f64], d: usize, r: usize, s1: Activation, s2: Activation) -> Result<Matrix> {
    let (b, a) = split(theta, d, r);
    s2.forward(&b).matmul(&s1.forward(&a))
}

/// Residual vector and its Jacobian (d² × 2dr).
fn linearize(
    theta: &[f64],
    target: &Matrix,
    d: usize,
    r: usize,
    s1: Activation,
    s2: Activation,
) -> Result<(Vec<f64>, Matrix)> {
    let (b, a) = split(theta, d, r);
    let sb = s2.forward(&b);
    let sa = s1.forward(&a);
    let res = sb.matmul(&sa)?.sub(target)?.into_vec();
    let mut jac = Matrix::zeros(d * d, 2 * d * r);
    for i in 0..d {
        for k in 0..r {
            let db = s2.derivative(b.get(i, k));
            for j in 0..d {
                jac.set(i * d + j, i * r + k, db * sa.get(k, j));
            }
        }
    }
    for k in 0..r {
        for j in 0..d {
            let da = s1.derivative(a.get(k, j));
            for i in 0..d {
                jac.set(i * d + j, d * r + k * d + j, sb.get(i, k) * da);
            }
        }
    }
    Ok((res, jac))
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn run_trial(
    trial: usize,
    rng: &mut SeededRng,
    s1: Activation,
    s2: Activation,
    cfg: &ProbeConfig,
) -> Result<Collision> {
    let (d, r) = (cfg.d, cfg.r);
    let n = 2 * d * r;
    let first: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let target = product(&first, d, r, s1, s2)?;
    let mut theta: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let mut lambda = 1e-3;
    let mut cost = sq(&product(&theta, d, r, s1, s2)?.sub(&target)?.into_vec());
    for _ in 0..cfg.max_iters {
        if cost.sqrt() < cfg.residual_tol * 1e-2 {
            break;
        }
        let (res, jac) = linearize(&theta, &target, d, r, s1, s2)?;
        let jtj = jac.t_matmul(&jac)?;
        let jtr = jac.t_matmul(&Matrix::column_vector(&res))?.into_vec();
        let mut improved = false;
        while lambda < 1e12 {
            let mut sys = jtj.clone();
            for i in 0..n {
                sys.set(i, i, sys.get(i, i) + lambda * (1.0 + jtj.get(i, i)));
            }
            let neg: Vec<f64> = jtr.iter().map(|v| -v).collect();
            let step = solve_spd(&sys, &neg)?;
            let cand: Vec<f64> = theta.iter().zip(&step).map(|(t, s)| t + s).collect();
            let c = sq(&product(&cand, d, r, s1, s2)?.sub(&target)?.into_vec());
            if c.is_finite() && c < cost {
                theta = cand;
                cost = c;
                lambda = (lambda / 3.0).max(1e-12);
                improved = true;
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }
    let separation = first
        .iter()
        .zip(&theta)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(Collision {
        trial,
        first,
        second: theta,
        residual: cost.sqrt(),
        separation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pair_collides() {
        let cfg = ProbeConfig {
            trials: 10,
            ..ProbeConfig::default()
        };
        let rep = check_assumptions(Activation::Identity, Activation::Identity, &cfg).unwrap();
        assert!(rep.collision_found());
        for c in &rep.collisions {
            let p1 = product(&c.first, 2, 2, Activation::Identity, Activation::Identity).unwrap();
            let p2 = product(&c.second, 2, 2, Activation::Identity, Activation::Identity).unwrap();
            assert!(p1.max_abs_diff(&p2).unwrap() < 1e-8);
            assert!(c.separation > cfg.min_separation);
        }
    }

    #[test]
    fn explicit_rescaling_is_a_collision() {
        let b = [0.3, -0.7, 0.5, 0.1];
        let a = [0.9, 0.2, -0.4, 0.6];
        let first: Vec<f64> = b.iter().chain(&a).copied().collect();
        let second: Vec<f64> = b
            .iter()
            .map(|x| 2.0 * x)
            .chain(a.iter().map(|x| x / 2.0))
            .collect();
        let id = Activation::Identity;
        let p1 = product(&first, 2, 2, id, id).unwrap();
        let p2 = product(&second, 2, 2, id, id).unwrap();
        assert!(p1.max_abs_diff(&p2).unwrap() < 1e-15);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = SeededRng::new(9);
        let (d, r) = (3, 2);
        let s1 = Activation::Tanh;
        let s2 = Activation::LeakyRelu { slope: 0.1 };
        let theta: Vec<f64> = (0..2 * d * r).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let target = Matrix::zeros(d, d);
        let (_, jac) = linearize(&theta, &target, d, r, s1, s2).unwrap();
        for p in 0..theta.len() {
            let h = 1e-6;
            let mut up = theta.clone();
            up[p] += h;
            let mut dn = theta.clone();
            dn[p] -= h;
            let pu = product(&up, d, r, s1, s2).unwrap().into_vec();
            let pd = product(&dn, d, r, s1, s2).unwrap().into_vec();
            for q in 0..d * d {
                let fd = (pu[q] - pd[q]) / (2.0 * h);
                assert!((fd - jac.get(q, p)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn report_lists_pairs_and_rejects_unknown_tags() {
        let cfg = ProbeConfig {
            trials: 3,
            ..ProbeConfig::default()
        };
        let rep = check_assumptions_tags("identity", "identity", &cfg).unwrap();
        let lines = rep.summary_lines();
        assert_eq!(lines.len(), 1 + rep.collisions.len());
        assert!(lines[0].contains("collisions="));
        assert!(check_assumptions_tags("relu6", "tanh", &cfg).is_err());
        assert!(check_assumptions(
            Activation::Tanh,
            Activation::Tanh,
            &ProbeConfig {
                trials: 0,
                ..cfg
            }
        )
        .is_err());
    }
}
