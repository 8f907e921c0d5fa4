//! Least-squares fitting of over-specified mixing measures.
//!
//! Parameters live in one flat vector, atom by atom: `c`, then the factors
//! row-major. Non-shared atoms carry `(B_Q, A_Q, B_V, A_V)`; shared atoms carry
//! the products `U = W₂B` and `V = W₁A` directly, i.e. `W₂ = I`, `W₁ = I`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::grad_wprime_chain;
use crate::moe::{
    FrozenMatrices, MeasureKind, MixingMeasure, NonSharedAtom, NonSharedMeasure, SharedAtom,
    SharedMeasure,
};
use crate::numeric::{frobenius_inner, Activation, Matrix, SeededRng};

use super::dataset::RegressionDataset;

/// Structure of the fitted family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: MeasureKind,
    pub d: usize,
    pub r: usize,
    /// Denominator offsets; ignored by the non-shared family.
    pub tau_q: f64,
    pub tau_v: f64,
    pub sigma1: Activation,
    pub sigma2: Activation,
    pub m_q: f64,
    pub m_v: f64,
}

impl ModelSpec {
    pub fn non_shared(d: usize, r: usize) -> Self {
        Self {
            kind: MeasureKind::NonShared,
            d,
            r,
            tau_q: 0.0,
            tau_v: 0.0,
            sigma1: Activation::Identity,
            sigma2: Activation::Identity,
            m_q: 1.0,
            m_v: 1.0,
        }
    }

    pub fn shared(d: usize, r: usize, tau_q: f64, tau_v: f64, sigma1: Activation, sigma2: Activation) -> Self {
        Self {
            kind: MeasureKind::Shared,
            d,
            r,
            tau_q,
            tau_v,
            sigma1,
            sigma2,
            m_q: 1.0,
            m_v: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.r == 0 {
            return Err(Error::Config("model needs d >= 1 and r >= 1".into()));
        }
        if self.kind == MeasureKind::Shared && !(self.tau_q > 0.0 && self.tau_v > 0.0) {
            return Err(Error::Config("shared model needs tau_q, tau_v > 0".into()));
        }
        self.sigma1.validate()?;
        self.sigma2.validate()
    }

    fn factor_shapes(&self) -> Vec<(usize, usize)> {
        let (d, r) = (self.d, self.r);
        match self.kind {
            MeasureKind::NonShared => vec![(d, r), (r, d), (d, r), (r, d)],
            MeasureKind::Shared => vec![(d, r), (r, d)],
        }
    }

    pub fn atom_stride(&self) -> usize {
        1 + self.factor_shapes().iter().map(|(a, b)| a * b).sum::<usize>()
    }

    fn split_atom<'a>(&self, chunk: &'a [f64]) -> (f64, Vec<Matrix>) {
        let mut off = 1;
        let factors = self
            .factor_shapes()
            .into_iter()
            .map(|(a, b)| {
                let m = Matrix::from_vec(a, b, chunk[off..off + a * b].to_vec())
                    .expect("stride matches factor shapes");
                off += a * b;
                m
            })
            .collect();
        (chunk[0], factors)
    }

    pub fn decode(&self, theta: &[f64]) -> Result<MixingMeasure> {
        let stride = self.atom_stride();
        if theta.is_empty() || theta.len() % stride != 0 {
            return Err(Error::dim("ModelSpec::decode", format!("multiple of {stride}"), theta.len()));
        }
        let atoms = theta.chunks(stride).map(|c| self.split_atom(c));
        Ok(match self.kind {
            MeasureKind::NonShared => MixingMeasure::NonShared(NonSharedMeasure {
                atoms: atoms
                    .map(|(c, mut f)| {
                        let a_v = f.pop().expect("four factors");
                        let b_v = f.pop().expect("four factors");
                        let a_q = f.pop().expect("four factors");
                        let b_q = f.pop().expect("four factors");
                        NonSharedAtom {
                            c,
                            b_q,
                            a_q,
                            b_v,
                            a_v,
                            m_q: self.m_q,
                            m_v: self.m_v,
                        }
                    })
                    .collect(),
            }),
            MeasureKind::Shared => MixingMeasure::Shared(SharedMeasure {
                atoms: atoms
                    .map(|(c, mut f)| {
                        let v = f.pop().expect("two factors");
                        let u = f.pop().expect("two factors");
                        SharedAtom {
                            m_q: self.m_q,
                            m_v: self.m_v,
                            ..SharedAtom::from_products(c, u, v)
                        }
                    })
                    .collect(),
                tau_q: self.tau_q,
                tau_v: self.tau_v,
                sigma1: self.sigma1,
                sigma2: self.sigma2,
            }),
        })
    }

    /// Inverse of [`decode`](Self::decode); shared atoms are collapsed to
    /// their products.
    pub fn encode(&self, g: &MixingMeasure) -> Result<Vec<f64>> {
        if g.kind() != self.kind {
            return Err(Error::Precondition(format!(
                "encode: measure is {}, model is {}",
                g.kind().tag(),
                self.kind.tag()
            )));
        }
        let mut out = Vec::with_capacity(g.len() * self.atom_stride());
        let shapes = self.factor_shapes();
        let mut push = |c: f64, factors: Vec<Matrix>| -> Result<()> {
            out.push(c);
            for (f, s) in factors.iter().zip(&shapes) {
                if f.shape() != *s {
                    return Err(Error::dim("ModelSpec::encode", format!("{s:?}"), format!("{:?}", f.shape())));
                }
                out.extend_from_slice(f.as_slice());
            }
            Ok(())
        };
        match g {
            MixingMeasure::NonShared(m) => {
                for a in &m.atoms {
                    push(a.c, a.factors().into_iter().cloned().collect())?;
                }
            }
            MixingMeasure::Shared(m) => {
                for a in &m.atoms {
                    push(a.c, vec![a.u()?, a.v()?])?;
                }
            }
        }
        Ok(out)
    }
}

/// `W = m·M/(‖M‖_F + τ)` backward: `∂L/∂M` from `∂L/∂W`.
fn normalized_backward(g: &Matrix, w: &Matrix, m: f64, tau: f64) -> Result<Matrix> {
    let (rows, cols) = w.shape();
    if tau > 0.0 {
        let col = |x: &Matrix| Matrix::from_vec(rows * cols, 1, x.as_slice().to_vec());
        let flat = grad_wprime_chain(&col(g)?, &col(w)?, &[m], tau)?;
        return Matrix::from_vec(rows, cols, flat.into_vec());
    }
    let n = w.frobenius_norm();
    if n == 0.0 {
        return Err(Error::Singularity {
            op: "normalized_backward",
            detail: "adapted matrix has zero Frobenius norm".into(),
        });
    }
    let proj = frobenius_inner(g, w)? / (n * n);
    let mut out = g.clone();
    out.axpy(-proj, w)?;
    Ok(out.scale(m / n))
}

struct AtomForward {
    gate: Matrix,
    expert: Matrix,
    m_q_mat: Matrix,
    m_v_mat: Matrix,
    factors: Vec<Matrix>,
    shared_act: Option<(Matrix, Matrix)>,
}

/// Mean squared residual `(1/n) Σ_i ‖Y_i − f_θ(X_i)‖²` over a dataset.
pub struct Objective<'a> {
    pub spec: ModelSpec,
    pub frozen: &'a FrozenMatrices,
    pub x: &'a [Vec<f64>],
    pub y: &'a [Vec<f64>],
}

impl<'a> Objective<'a> {
    pub fn new(spec: ModelSpec, frozen: &'a FrozenMatrices, ds: &'a RegressionDataset) -> Result<Self> {
        spec.validate()?;
        frozen.validate()?;
        if frozen.d() != spec.d || ds.dim() != spec.d {
            return Err(Error::dim("Objective", spec.d, format!("frozen {} data {}", frozen.d(), ds.dim())));
        }
        Ok(Self {
            spec,
            frozen,
            x: &ds.x,
            y: &ds.y,
        })
    }

    fn forward_atom(&self, chunk: &[f64]) -> Result<AtomForward> {
        let sp = &self.spec;
        let fz = self.frozen;
        let (_, factors) = sp.split_atom(chunk);
        let (p_q, p_v, shared_act) = match sp.kind {
            MeasureKind::NonShared => (
                factors[0].matmul(&factors[1])?,
                factors[2].matmul(&factors[3])?,
                None,
            ),
            MeasureKind::Shared => {
                let s2 = sp.sigma2.forward(&factors[0]);
                let s1 = sp.sigma1.forward(&factors[1]);
                let p = s2.matmul(&s1)?;
                (p.clone(), p, Some((s2, s1)))
            }
        };
        let m_q_mat = fz.c_q.add(&p_q)?;
        let m_v_mat = fz.c_v.add(&p_v)?;
        let dq = m_q_mat.frobenius_norm() + sp.tau_q;
        let dv = m_v_mat.frobenius_norm() + sp.tau_v;
        if dq == 0.0 || dv == 0.0 {
            return Err(Error::Singularity {
                op: "Objective",
                detail: "adapted matrix has zero Frobenius norm".into(),
            });
        }
        Ok(AtomForward {
            gate: m_q_mat.scale(sp.m_q / dq).matmul(&fz.c_k)?,
            expert: m_v_mat.scale(sp.m_v / dv),
            m_q_mat,
            m_v_mat,
            factors,
            shared_act,
        })
    }

    pub fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.evaluate(theta, false)?.0)
    }

    pub fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (v, g) = self.evaluate(theta, true)?;
        Ok((v, g.expect("gradient requested")))
    }

    fn evaluate(&self, theta: &[f64], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let sp = self.spec;
        let stride = sp.atom_stride();
        if theta.is_empty() || theta.len() % stride != 0 {
            return Err(Error::dim("Objective", format!("multiple of {stride}"), theta.len()));
        }
        let chunks: Vec<&[f64]> = theta.chunks(stride).collect();
        let atoms = chunks
            .iter()
            .map(|c| self.forward_atom(c))
            .collect::<Result<Vec<_>>>()?;
        let l = atoms.len();
        let d = sp.d;
        let n = self.x.len();
        let inv_n = 1.0 / n as f64;

        let mut d_gate = vec![vec![0.0; d * d]; l];
        let mut d_expert = vec![vec![0.0; d * d]; l];
        let mut d_c = vec![0.0; l];
        let mut logits = vec![0.0; l];
        let mut ex = vec![vec![0.0; d]; l];
        let mut f = vec![0.0; d];
        let mut res = vec![0.0; d];
        let mut loss = 0.0;
        for (x, y) in self.x.iter().zip(self.y) {
            for (k, a) in atoms.iter().enumerate() {
                let g = a.gate.as_slice();
                let e = a.expert.as_slice();
                let mut logit = chunks[k][0];
                for i in 0..d {
                    let row = &g[i * d..(i + 1) * d];
                    let gx: f64 = row.iter().zip(x).map(|(u, v)| u * v).sum();
                    logit += x[i] * gx;
                    ex[k][i] = e[i * d..(i + 1) * d].iter().zip(x).map(|(u, v)| u * v).sum();
                }
                logits[k] = logit;
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in logits.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            logits.iter_mut().for_each(|v| *v /= z);
            let gates = &logits;
            f.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..l {
                for i in 0..d {
                    f[i] += gates[k] * ex[k][i];
                }
            }
            for i in 0..d {
                res[i] = f[i] - y[i];
                loss += res[i] * res[i];
            }
            if !want_grad {
                continue;
            }
            let scale = 2.0 * inv_n;
            let a: Vec<f64> = (0..l)
                .map(|k| scale * res.iter().zip(&ex[k]).map(|(u, v)| u * v).sum::<f64>())
                .collect();
            let abar: f64 = (0..l).map(|k| gates[k] * a[k]).sum();
            for k in 0..l {
                let dl = gates[k] * (a[k] - abar);
                d_c[k] += dl;
                let dg = &mut d_gate[k];
                let de = &mut d_expert[k];
                let wk = gates[k] * scale;
                for i in 0..d {
                    let dli = dl * x[i];
                    let wri = wk * res[i];
                    for j in 0..d {
                        dg[i * d + j] += dli * x[j];
                        de[i * d + j] += wri * x[j];
                    }
                }
            }
        }
        loss *= inv_n;
        if !want_grad {
            return Ok((loss, None));
        }

        let mut grad = vec![0.0; theta.len()];
        for (k, a) in atoms.iter().enumerate() {
            let out = &mut grad[k * stride..(k + 1) * stride];
            out[0] = d_c[k];
            let dg = Matrix::from_vec(d, d, std::mem::take(&mut d_gate[k]))?;
            let de = Matrix::from_vec(d, d, std::mem::take(&mut d_expert[k]))?;
            let d_mq = normalized_backward(
                &dg.matmul_t(&self.frozen.c_k)?,
                &a.m_q_mat,
                sp.m_q,
                sp.tau_q,
            )?;
            let d_mv = normalized_backward(&de, &a.m_v_mat, sp.m_v, sp.tau_v)?;
            let factor_grads = match (&a.shared_act, sp.kind) {
                (None, MeasureKind::NonShared) => {
                    let f = &a.factors;
                    vec![
                        d_mq.matmul_t(&f[1])?,
                        f[0].t_matmul(&d_mq)?,
                        d_mv.matmul_t(&f[3])?,
                        f[2].t_matmul(&d_mv)?,
                    ]
                }
                (Some((s2, s1)), MeasureKind::Shared) => {
                    let dp = d_mq.add(&d_mv)?;
                    let du = sp.sigma2.backward(&a.factors[0], &dp.matmul_t(s1)?)?;
                    let dv = sp.sigma1.backward(&a.factors[1], &s2.t_matmul(&dp)?)?;
                    vec![du, dv]
                }
                _ => unreachable!("activation cache follows kind"),
            };
            let mut off = 1;
            for fg in factor_grads {
                let s = fg.as_slice();
                out[off..off + s.len()].copy_from_slice(s);
                off += s.len();
            }
        }
        Ok((loss, Some(grad)))
    }
}

/// Adam with a cosine step-size schedule and entrywise box projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Number of fitted atoms `L′`.
    pub atoms: usize,
    pub restarts: usize,
    pub steps: usize,
    pub lr: f64,
    /// Final step size as a fraction of `lr`.
    pub lr_floor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Box `Θ = [−θ_max, θ_max]` applied to every parameter after each step.
    pub theta_max: f64,
    /// Initial factor entries are uniform in `[−init_range, init_range]`.
    pub init_range: f64,
    pub trace_every: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            atoms: 3,
            restarts: 4,
            steps: 1500,
            lr: 0.03,
            lr_floor: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            theta_max: 2.0,
            init_range: 1.0,
            trace_every: 50,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.atoms == 0 || self.restarts == 0 {
            return Err(Error::Config("fit needs atoms >= 1 and restarts >= 1".into()));
        }
        if !(self.lr > 0.0 && self.theta_max > 0.0 && self.init_range >= 0.0) {
            return Err(Error::Config("fit needs lr > 0, theta_max > 0, init_range >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) || !(self.eps > 0.0) {
            return Err(Error::Config("fit needs lr_floor in [0, 1] and eps > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub measure: MixingMeasure,
    pub theta: Vec<f64>,
    pub train_loss: f64,
    pub iterations: usize,
    /// Index of the restart that produced `measure`.
    pub restart: usize,
    /// Loss every `trace_every` steps of the winning restart.
    pub trace: Vec<TracePoint>,
}

fn random_start(spec: &ModelSpec, cfg: &FitConfig, rng: &mut SeededRng) -> Vec<f64> {
    let stride = spec.atom_stride();
    let mut theta = Vec::with_capacity(stride * cfg.atoms);
    for _ in 0..cfg.atoms {
        theta.push(rng.uniform_range(-0.5, 0.5));
        for _ in 1..stride {
            theta.push(rng.uniform_range(-cfg.init_range, cfg.init_range));
        }
    }
    theta
}

fn descend(
    obj: &Objective,
    cfg: &FitConfig,
    restart: usize,
    mut theta: Vec<f64>,
) -> Result<(Vec<f64>, f64, Vec<TracePoint>)> {
    let p = theta.len();
    let (mut m1, mut m2) = (vec![0.0; p], vec![0.0; p]);
    let mut trace = Vec::new();
    for step in 0..cfg.steps {
        let (loss, grad) = obj.value_and_grad(&theta)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                restart,
                step,
                value: loss,
            });
        }
        if cfg.trace_every > 0 && step % cfg.trace_every == 0 {
            trace.push(TracePoint { step, loss });
        }
        let progress = step as f64 / cfg.steps as f64;
        let lr = cfg.lr
            * (cfg.lr_floor
                + 0.5 * (1.0 - cfg.lr_floor) * (1.0 + (std::f64::consts::PI * progress).cos()));
        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        for i in 0..p {
            m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * grad[i];
            m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let upd = lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + cfg.eps);
            theta[i] = (theta[i] - upd).clamp(-cfg.theta_max, cfg.theta_max);
        }
    }
    let loss = obj.value(&theta)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            restart,
            step: cfg.steps,
            value: loss,
        });
    }
    trace.push(TracePoint {
        step: cfg.steps,
        loss,
    });
    Ok((theta, loss, trace))
}

fn check_sizes(ds: &RegressionDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Config("fit needs a non-empty dataset".into()));
    }
    Ok(())
}

/// Best of `cfg.restarts` random starts by final training loss.
pub fn fit_least_squares(
    ds: &RegressionDataset,
    frozen: &FrozenMatrices,
    spec: ModelSpec,
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    check_sizes(ds)?;
    let obj = Objective::new(spec, frozen, ds)?;
    let root = SeededRng::new(cfg.seed);
    let mut best: Option<FitResult> = None;
    for restart in 0..cfg.restarts {
        let start = random_start(&spec, cfg, &mut root.derive(restart as u64));
        let (theta, loss, trace) = descend(&obj, cfg, restart, start)?;
        if best.as_ref().is_none_or(|b| loss < b.train_loss) {
            best = Some(FitResult {
                measure: spec.decode(&theta)?,
                theta,
                train_loss: loss,
                iterations: cfg.steps,
                restart,
                trace,
            });
        }
    }
    Ok(best.expect("restarts >= 1"))
}

/// Single descent from a given measure (no restarts).
pub fn fit_from(
    ds: &RegressionDataset,
    frozen: &FrozenMatrices,
    spec: ModelSpec,
    cfg: &FitConfig,
    start: &MixingMeasure,
) -> Result<FitResult> {
    cfg.validate()?;
    check_sizes(ds)?;
    let obj = Objective::new(spec, frozen, ds)?;
    let (theta, loss, trace) = descend(&obj, cfg, 0, spec.encode(start)?)?;
    Ok(FitResult {
        measure: spec.decode(&theta)?,
        theta,
        train_loss: loss,
        iterations: cfg.steps,
        restart: 0,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::sample_dataset;
    use crate::gradients::{finite_diff, relative_error, FD_REL_STEP};
    use crate::moe::{random_nonshared, random_shared, MeasureDims};

    fn dims(d: usize, r: usize) -> MeasureDims {
        MeasureDims {
            d,
            r,
            inner_b: d,
            inner_a: r,
        }
    }

    #[test]
    fn encode_decode_roundtrip_preserves_function() {
        let mut rng = SeededRng::new(1);
        let fz = FrozenMatrices::random(4, &mut rng);
        let g = MixingMeasure::Shared(random_shared(
            3,
            MeasureDims {
                d: 4,
                r: 2,
                inner_b: 3,
                inner_a: 5,
            },
            1.0,
            0.5,
            0.4,
            Activation::Tanh,
            Activation::Tanh,
            &mut rng,
        ));
        let spec = ModelSpec::shared(4, 2, 0.5, 0.4, Activation::Tanh, Activation::Tanh);
        let back = spec.decode(&spec.encode(&g).unwrap()).unwrap();
        let x = rng.uniform_ball(4, 1.0);
        let (a, b) = (g.eval(&fz, &x).unwrap(), back.eval(&fz, &x).unwrap());
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-14);
        }
        assert!(ModelSpec::non_shared(4, 2).encode(&g).is_err());
    }

    #[test]
    fn objective_matches_direct_evaluation() {
        let mut rng = SeededRng::new(2);
        let fz = FrozenMatrices::random(3, &mut rng);
        let g = MixingMeasure::NonShared(random_nonshared(2, dims(3, 2), 1.0, &mut rng));
        let ds = sample_dataset(&g, &fz, 40, 0.2, 5, 1.0).unwrap();
        let spec = ModelSpec::non_shared(3, 2);
        let obj = Objective::new(spec, &fz, &ds).unwrap();
        let theta = spec.encode(&g).unwrap();
        let direct: f64 = ds
            .x
            .iter()
            .zip(&ds.y)
            .map(|(x, y)| {
                let f = g.eval(&fz, x).unwrap();
                f.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .sum::<f64>()
            / 40.0;
        assert!((obj.value(&theta).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(3);
        let fz = FrozenMatrices::random(4, &mut rng);
        let truth = MixingMeasure::NonShared(random_nonshared(2, dims(4, 2), 1.0, &mut rng));
        let ds = sample_dataset(&truth, &fz, 30, 0.1, 6, 1.0).unwrap();
        let specs = [
            ModelSpec::non_shared(4, 2),
            ModelSpec::shared(4, 2, 0.5, 0.3, Activation::Tanh, Activation::Tanh),
            ModelSpec::shared(
                4,
                2,
                0.2,
                0.7,
                Activation::LeakyRelu { slope: 0.1 },
                Activation::Tanh,
            ),
        ];
        for spec in specs {
            let obj = Objective::new(spec, &fz, &ds).unwrap();
            let cfg = FitConfig::default();
            let theta = random_start(&spec, &cfg, &mut rng);
            let (_, grad) = obj.value_and_grad(&theta).unwrap();
            let loss = |t: &[f64]| obj.value(t).unwrap();
            let fd = finite_diff(&loss, &theta, FD_REL_STEP).unwrap();
            for (a, n) in grad.iter().zip(&fd) {
                assert!(relative_error(*a, *n) < 1e-5, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn truth_is_stationary_without_noise() {
        let mut rng = SeededRng::new(4);
        let fz = FrozenMatrices::random(2, &mut rng);
        let truth = MixingMeasure::NonShared(random_nonshared(1, dims(2, 1), 1.0, &mut rng));
        let ds = sample_dataset(&truth, &fz, 100, 0.0, 1, 1.0).unwrap();
        let spec = ModelSpec::non_shared(2, 1);
        let cfg = FitConfig {
            atoms: 1,
            steps: 200,
            ..FitConfig::default()
        };
        let fit = fit_from(&ds, &fz, spec, &cfg, &truth).unwrap();
        assert!(fit.train_loss < 1e-20);
        let (a, b) = (spec.encode(&truth).unwrap(), fit.theta.clone());
        let drift = a.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-6, "drift {drift}");
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            FitConfig {
                atoms: 0,
                ..FitConfig::default()
            },
            FitConfig {
                restarts: 0,
                ..FitConfig::default()
            },
            FitConfig {
                beta1: 1.0,
                ..FitConfig::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
        assert!(ModelSpec::shared(4, 2, 0.0, 1.0, Activation::Tanh, Activation::Tanh)
            .validate()
            .is_err());
    }
}
