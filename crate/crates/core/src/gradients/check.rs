//! Finite-difference verification of [`backprop_adapter`] on random adapters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::{share, DoranAdapter, FactorSource, HyperNetConfig, HyperNetPair, Projection};
use crate::error::{Error, Result};
use crate::numeric::{softplus_inverse, Activation, Matrix, SeededRng};

use super::backprop::{backprop_adapter, GradBundle};
use super::fd::{finite_diff_step, relative_error, FD_REL_STEP};
use super::oracle::DdOracle;

/// One trainable tensor of an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    B,
    A,
    M,
    TauRaw,
    BEmbed,
    AEmbed,
    W1B,
    W1A,
    W2B(usize),
    W2A(usize),
}

impl ParamId {
    pub fn name(&self) -> String {
        match self {
            ParamId::B => "b".into(),
            ParamId::A => "a".into(),
            ParamId::M => "m".into(),
            ParamId::TauRaw => "tau_raw".into(),
            ParamId::BEmbed => "b_embed".into(),
            ParamId::AEmbed => "a_embed".into(),
            ParamId::W1B => "w1_b".into(),
            ParamId::W1A => "w1_a".into(),
            ParamId::W2B(_) => "w2_b".into(),
            ParamId::W2A(_) => "w2_a".into(),
        }
    }
}

/// Parameters the adapter's output depends on (hypernet second layers only
/// for the adapter's own slot).
pub fn adapter_params(ad: &DoranAdapter) -> Result<Vec<ParamId>> {
    let mut ids = vec![ParamId::M, ParamId::TauRaw];
    match ad.source() {
        FactorSource::Direct { .. } => ids.extend([ParamId::B, ParamId::A]),
        FactorSource::Hyper {
            net,
            head,
            projection,
        } => {
            let slot = read_net(net)?.slot(*head, *projection)?;
            ids.extend([
                ParamId::BEmbed,
                ParamId::AEmbed,
                ParamId::W1B,
                ParamId::W1A,
                ParamId::W2B(slot),
                ParamId::W2A(slot),
            ]);
        }
    }
    Ok(ids)
}

fn read_net(
    net: &crate::adapters::SharedHyperNet,
) -> Result<std::sync::RwLockReadGuard<'_, HyperNetPair>> {
    net.read()
        .map_err(|_| Error::State("hypernet lock poisoned".into()))
}

fn net_tensor(net: &HyperNetPair, id: ParamId) -> Option<&Matrix> {
    match id {
        ParamId::BEmbed => Some(&net.b_embed),
        ParamId::AEmbed => Some(&net.a_embed),
        ParamId::W1B => Some(&net.w1_b),
        ParamId::W1A => Some(&net.w1_a),
        ParamId::W2B(s) => net.w2_b.get(s),
        ParamId::W2A(s) => net.w2_a.get(s),
        _ => None,
    }
}

fn net_tensor_mut(net: &mut HyperNetPair, id: ParamId) -> Option<&mut Matrix> {
    match id {
        ParamId::BEmbed => Some(&mut net.b_embed),
        ParamId::AEmbed => Some(&mut net.a_embed),
        ParamId::W1B => Some(&mut net.w1_b),
        ParamId::W1A => Some(&mut net.w1_a),
        ParamId::W2B(s) => net.w2_b.get_mut(s),
        ParamId::W2A(s) => net.w2_a.get_mut(s),
        _ => None,
    }
}

fn missing(id: ParamId) -> Error {
    Error::Lookup(format!("adapter has no parameter {}", id.name()))
}

/// Flattened (row-major) values of one parameter.
pub fn read_param(ad: &DoranAdapter, id: ParamId) -> Result<Vec<f64>> {
    match (id, ad.source()) {
        (ParamId::M, _) => Ok(ad.m().to_vec()),
        (ParamId::TauRaw, _) => Ok(vec![ad.tau_raw()]),
        (ParamId::B, FactorSource::Direct { b, .. }) => Ok(b.as_slice().to_vec()),
        (ParamId::A, FactorSource::Direct { a, .. }) => Ok(a.as_slice().to_vec()),
        (_, FactorSource::Hyper { net, .. }) => net_tensor(&*read_net(net)?, id)
            .map(|m| m.as_slice().to_vec())
            .ok_or_else(|| missing(id)),
        _ => Err(missing(id)),
    }
}

/// Overwrites one parameter. Hypernet parameters are written through the
/// shared handle, so every adapter on that network sees the change.
pub fn write_param(ad: &mut DoranAdapter, id: ParamId, values: &[f64]) -> Result<()> {
    let check = |len: usize| -> Result<()> {
        if len != values.len() {
            return Err(Error::dim("write_param", len, values.len()));
        }
        Ok(())
    };
    match id {
        ParamId::M => ad.set_m(values.to_vec()),
        ParamId::TauRaw => {
            check(1)?;
            ad.set_tau_raw(values[0]);
            Ok(())
        }
        ParamId::B | ParamId::A => {
            let (b, a) = ad.direct_factors_mut().ok_or_else(|| missing(id))?;
            let target = if id == ParamId::B { b } else { a };
            check(target.as_slice().len())?;
            target.as_mut_slice().copy_from_slice(values);
            Ok(())
        }
        _ => {
            ad.clear_cache();
            let FactorSource::Hyper { net, .. } = ad.source() else {
                return Err(missing(id));
            };
            let mut guard = net
                .write()
                .map_err(|_| Error::State("hypernet lock poisoned".into()))?;
            let target = net_tensor_mut(&mut guard, id).ok_or_else(|| missing(id))?;
            check(target.as_slice().len())?;
            target.as_mut_slice().copy_from_slice(values);
            Ok(())
        }
    }
}

/// Analytic gradient of one parameter, flattened like [`read_param`].
pub fn bundle_param(bundle: &GradBundle, id: ParamId) -> Result<Vec<f64>> {
    let hyper = || bundle.hyper.as_ref().ok_or_else(|| missing(id));
    Ok(match id {
        ParamId::B => bundle.d_b.as_slice().to_vec(),
        ParamId::A => bundle.d_a.as_slice().to_vec(),
        ParamId::M => bundle.d_m.clone(),
        ParamId::TauRaw => vec![bundle.d_tau_raw],
        ParamId::BEmbed => hyper()?.d_b_embed.as_slice().to_vec(),
        ParamId::AEmbed => hyper()?.d_a_embed.as_slice().to_vec(),
        ParamId::W1B => hyper()?.d_w1_b.as_slice().to_vec(),
        ParamId::W1A => hyper()?.d_w1_a.as_slice().to_vec(),
        ParamId::W2B(s) => hyper()?.d_w2_b.get(s).ok_or_else(|| missing(id))?.as_slice().to_vec(),
        ParamId::W2A(s) => hyper()?.d_w2_a.get(s).ok_or_else(|| missing(id))?.as_slice().to_vec(),
    })
}

/// Copy with its own hypernetwork, so probes never disturb the original.
#[cfg(test)]
pub(crate) fn detached_clone(ad: &DoranAdapter) -> Result<DoranAdapter> {
    let mut copy = ad.clone();
    if let FactorSource::Hyper {
        net,
        head,
        projection,
    } = ad.source()
    {
        let fresh = share(read_net(net)?.clone());
        copy = DoranAdapter::new(
            ad.w0().clone(),
            ad.m().to_vec(),
            ad.tau_raw(),
            FactorSource::Hyper {
                net: fresh,
                head: *head,
                projection: *projection,
            },
        )?;
    }
    Ok(copy)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub seed: u64,
    /// Relative-error bound for parameters with `|θ| ≥ 1e-6`.
    pub tol: f64,
    /// Bound for parameters with `|θ| < 1e-6`.
    pub small_param_tol: f64,
    pub max_dim: usize,
    pub max_rank: usize,
    pub tau_min: f64,
    pub tau_max: f64,
    pub embed_dim: usize,
    pub hidden: usize,
    /// Negative control: perturbs one analytic entry before comparison.
    #[serde(default)]
    pub corrupt: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            tol: 1e-6,
            small_param_tol: 1e-4,
            max_dim: 16,
            max_rank: 4,
            tau_min: 1e-3,
            tau_max: 10.0,
            embed_dim: HyperNetConfig::default().embed_dim,
            hidden: HyperNetConfig::default().hidden,
            corrupt: false,
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.trials == 0 {
            return bad("trials must be >= 1");
        }
        if !(self.tol > 0.0 && self.small_param_tol > 0.0) {
            return bad("tolerances must be > 0");
        }
        if self.max_dim < 2 || self.max_dim > 64 {
            return bad("max_dim must lie in 2..=64");
        }
        if self.max_rank == 0 {
            return bad("max_rank must be >= 1");
        }
        if !(self.tau_min > 0.0 && self.tau_max >= self.tau_min && self.tau_max.is_finite()) {
            return bad("need 0 < tau_min <= tau_max < inf");
        }
        if self.embed_dim == 0 || self.hidden == 0 {
            return bad("embed_dim and hidden must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamReport {
    pub max_rel_err: f64,
    pub worst_trial: usize,
    /// `[row, col]` of the worst entry within the parameter tensor.
    pub worst_coord: [usize; 2],
    pub analytic: f64,
    pub numeric: f64,
    pub eps: f64,
    pub violations: usize,
    pub entries_checked: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub fd_rel_step: f64,
    pub params: BTreeMap<String, ParamReport>,
    pub passed: bool,
}

struct Instance {
    adapter: DoranAdapter,
    target: Matrix,
}

fn random_instance(cfg: &GradCheckConfig, trial: usize, rng: &mut SeededRng) -> Result<Instance> {
    let d = 2 + rng.below(cfg.max_dim - 1);
    let k = 2 + rng.below(cfg.max_dim - 1);
    let r = 1 + rng.below(cfg.max_rank.min(d).min(k));
    let tau = (cfg.tau_min.ln() + rng.uniform() * (cfg.tau_max.ln() - cfg.tau_min.ln())).exp();
    let w0 = rng.gaussian_matrix(d, k, 1.0);
    let m: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.5, 2.0)).collect();
    let source = if trial % 2 == 0 {
        FactorSource::Direct {
            b: rng.gaussian_matrix(d, r, 0.5),
            a: rng.gaussian_matrix(r, k, 0.5),
        }
    } else {
        let activation = if trial % 4 == 1 {
            Activation::LeakyRelu { slope: 0.01 }
        } else {
            Activation::Tanh
        };
        let hcfg = HyperNetConfig {
            embed_dim: cfg.embed_dim,
            hidden: cfg.hidden,
            activation,
        };
        let net = HyperNetPair::random(d, k, r, 2, &hcfg, rng)?;
        FactorSource::Hyper {
            net: share(net),
            head: rng.below(2),
            projection: if rng.below(2) == 0 {
                Projection::Query
            } else {
                Projection::Value
            },
        }
    };
    let adapter = DoranAdapter::new(w0, m, softplus_inverse(tau), source)?;
    let target = rng.gaussian_matrix(d, k, 1.0);
    Ok(Instance { adapter, target })
}

fn param_cols(ad: &DoranAdapter, id: ParamId) -> Result<usize> {
    Ok(match (id, ad.source()) {
        (ParamId::M | ParamId::TauRaw, _) => 1,
        (ParamId::B, FactorSource::Direct { b, .. }) => b.cols(),
        (ParamId::A, FactorSource::Direct { a, .. }) => a.cols(),
        (_, FactorSource::Hyper { net, .. }) => {
            net_tensor(&*read_net(net)?, id).ok_or_else(|| missing(id))?.cols()
        }
        _ => return Err(missing(id)),
    })
}

/// Compares [`backprop_adapter`] with central differences of
/// `½‖W − T‖²_F` (see [`DdOracle`]) for every parameter of `cfg.trials`
/// random adapters.
pub fn run_grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    let mut params: BTreeMap<String, ParamReport> = BTreeMap::new();
    for trial in 0..cfg.trials {
        let mut rng = root.derive(trial as u64);
        let Instance {
            mut adapter,
            target,
        } = random_instance(cfg, trial, &mut rng)?;
        let w = adapter.forward()?;
        let g = w.sub(&target)?;
        let bundle = backprop_adapter(&adapter, &g)?;
        let oracle = DdOracle::new(&adapter, &target)?;
        if !bundle.is_finite() {
            return Err(Error::State(format!("non-finite gradient in trial {trial}")));
        }
        for id in adapter_params(&adapter)? {
            let theta = read_param(&adapter, id)?;
            let mut analytic = bundle_param(&bundle, id)?;
            if cfg.corrupt && trial == 0 && id == ParamId::M {
                analytic[0] = analytic[0] * (1.0 + 1e-3) + 1e-3;
            }
            let numeric = oracle.gradient(id, &theta, FD_REL_STEP)?;
            let cols = param_cols(&adapter, id)?;
            let entry = params.entry(id.name()).or_insert(ParamReport {
                max_rel_err: 0.0,
                worst_trial: 0,
                worst_coord: [0, 0],
                analytic: 0.0,
                numeric: 0.0,
                eps: 0.0,
                violations: 0,
                entries_checked: 0,
            });
            for (i, ((a, n), t)) in analytic.iter().zip(&numeric).zip(&theta).enumerate() {
                let err = relative_error(*a, *n);
                let bound = if t.abs() < 1e-6 {
                    cfg.small_param_tol
                } else {
                    cfg.tol
                };
                entry.entries_checked += 1;
                if !(err < bound) {
                    entry.violations += 1;
                }
                if err > entry.max_rel_err || err.is_nan() {
                    entry.max_rel_err = err;
                    entry.worst_trial = trial;
                    entry.worst_coord = [i / cols, i % cols];
                    entry.analytic = *a;
                    entry.numeric = *n;
                    entry.eps = finite_diff_step(*t, FD_REL_STEP);
                }
            }
        }
    }
    let passed = params.values().all(|p| p.violations == 0);
    Ok(GradCheckReport {
        config: cfg.clone(),
        fd_rel_step: FD_REL_STEP,
        params,
        passed,
    })
}
