//! Finite-difference oracle for `½‖W − T‖²` evaluated in double-double.
//!
//! A double-precision central difference carries round-off of order
//! `ulp(W)/ε` per entry, which is larger than 1e-6 of a gradient entry that
//! is small through cancellation. Here every intermediate is kept to ~32
//! digits and the fourth-order central stencil
//! `[8(L₊₁ − L₋₁) − (L₊₂ − L₋₂)] / 12ε` removes the `ε²` truncation term, so
//! the oracle is accurate well below the tolerances it checks.
//!
//! A one-entry perturbation changes a single row or column of the
//! pre-activations, so only that slice is recomputed.

use rayon::prelude::*;

use crate::adapters::{DoranAdapter, FactorSource};
use crate::error::{Error, Result};
use crate::numeric::{Activation, Dd, Matrix};

use super::check::ParamId;
use super::fd::finite_diff_step;

#[derive(Debug, Clone)]
struct DdMat {
    rows: usize,
    cols: usize,
    data: Vec<Dd>,
}

impl DdMat {
    fn from_matrix(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.as_slice().iter().map(|&x| Dd::from_f64(x)).collect(),
        }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> Dd {
        self.data[i * self.cols + j]
    }

    #[inline]
    fn at_mut(&mut self, i: usize, j: usize) -> &mut Dd {
        &mut self.data[i * self.cols + j]
    }

    fn matmul(&self, other: &DdMat) -> DdMat {
        let mut data = vec![Dd::ZERO; self.rows * other.cols];
        for i in 0..self.rows {
            for l in 0..self.cols {
                let a = self.at(i, l);
                for j in 0..other.cols {
                    let c = &mut data[i * other.cols + j];
                    *c = *c + a * other.at(l, j);
                }
            }
        }
        DdMat {
            rows: self.rows,
            cols: other.cols,
            data,
        }
    }
}

fn activate(act: Activation, x: Dd) -> Dd {
    match act {
        Activation::LeakyRelu { slope } => {
            if x.hi >= 0.0 {
                x
            } else {
                x.mul_f64(slope)
            }
        }
        Activation::Tanh => x.tanh(),
        Activation::Identity => x,
    }
}

/// One side of the hypernetwork: `factor = W2 · σ(W1 · embed)`.
#[derive(Debug, Clone)]
struct Branch {
    embed: DdMat,
    w1: DdMat,
    w2: DdMat,
    pre: DdMat,
    hidden: DdMat,
}

impl Branch {
    fn new(embed: &Matrix, w1: &Matrix, w2: &Matrix, act: Activation) -> Self {
        let embed = DdMat::from_matrix(embed);
        let w1 = DdMat::from_matrix(w1);
        let pre = w1.matmul(&embed);
        let mut hidden = pre.clone();
        for v in &mut hidden.data {
            *v = activate(act, *v);
        }
        Self {
            embed,
            w2: DdMat::from_matrix(w2),
            w1,
            pre,
            hidden,
        }
    }

    fn factor(&self) -> DdMat {
        self.w2.matmul(&self.hidden)
    }

    /// Factor after `embed[j, c] += delta`: column `c` of the pre-activation
    /// moves by `delta · W1[:, j]`.
    fn shift_embed(&self, idx: usize, delta: Dd, act: Activation) -> DdMat {
        let (j, c) = (idx / self.embed.cols, idx % self.embed.cols);
        let mut hidden = self.hidden.clone();
        for i in 0..self.pre.rows {
            *hidden.at_mut(i, c) = activate(act, self.pre.at(i, c) + delta * self.w1.at(i, j));
        }
        self.w2.matmul(&hidden)
    }

    /// Factor after `W1[i, j] += delta`: row `i` of the pre-activation moves
    /// by `delta · embed[j, :]`.
    fn shift_w1(&self, idx: usize, delta: Dd, act: Activation) -> DdMat {
        let (i, j) = (idx / self.w1.cols, idx % self.w1.cols);
        let mut hidden = self.hidden.clone();
        for c in 0..self.pre.cols {
            *hidden.at_mut(i, c) = activate(act, self.pre.at(i, c) + delta * self.embed.at(j, c));
        }
        self.w2.matmul(&hidden)
    }

    /// Factor after `W2[p, i] += delta`: row `p` moves by `delta · hidden[i, :]`.
    fn shift_w2(&self, base: &DdMat, idx: usize, delta: Dd) -> DdMat {
        let (p, i) = (idx / self.w2.cols, idx % self.w2.cols);
        let mut out = base.clone();
        for c in 0..out.cols {
            *out.at_mut(p, c) = out.at(p, c) + delta * self.hidden.at(i, c);
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Source {
    Direct,
    Hyper {
        slot: usize,
        act: Activation,
        b: Branch,
        a: Branch,
    },
}

/// Reconstruction loss of one adapter in double-double, with single-entry
/// parameter shifts.
#[derive(Debug, Clone)]
pub struct DdOracle {
    w0: DdMat,
    m: Vec<Dd>,
    tau_raw: Dd,
    target: DdMat,
    b: DdMat,
    a: DdMat,
    source: Source,
}

impl DdOracle {
    pub fn new(ad: &DoranAdapter, target: &Matrix) -> Result<Self> {
        if target.shape() != ad.w0().shape() {
            return Err(Error::dim(
                "DdOracle::new",
                format!("{:?}", ad.w0().shape()),
                format!("{:?}", target.shape()),
            ));
        }
        let (b, a, source) = match ad.source() {
            FactorSource::Direct { b, a } => (DdMat::from_matrix(b), DdMat::from_matrix(a), Source::Direct),
            FactorSource::Hyper {
                net,
                head,
                projection,
            } => {
                let net = net
                    .read()
                    .map_err(|_| Error::State("hypernet lock poisoned".into()))?;
                let slot = net.slot(*head, *projection)?;
                let act = net.activation;
                let bb = Branch::new(&net.b_embed, &net.w1_b, &net.w2_b[slot], act);
                let ab = Branch::new(&net.a_embed, &net.w1_a, &net.w2_a[slot], act);
                (
                    bb.factor(),
                    ab.factor(),
                    Source::Hyper {
                        slot,
                        act,
                        b: bb,
                        a: ab,
                    },
                )
            }
        };
        Ok(Self {
            w0: DdMat::from_matrix(ad.w0()),
            m: ad.m().iter().map(|&x| Dd::from_f64(x)).collect(),
            tau_raw: Dd::from_f64(ad.tau_raw()),
            target: DdMat::from_matrix(target),
            b,
            a,
            source,
        })
    }

    fn loss_of(&self, b: &DdMat, a: &DdMat, m_shift: Option<(usize, Dd)>, tau_raw: Dd) -> Dd {
        let mut wprime = b.matmul(a);
        for (w, w0) in wprime.data.iter_mut().zip(&self.w0.data) {
            *w = *w + *w0;
        }
        let tau = tau_raw.softplus();
        let mut loss = Dd::ZERO;
        for j in 0..wprime.cols {
            let mut sq = Dd::ZERO;
            for i in 0..wprime.rows {
                sq = sq + wprime.at(i, j).square();
            }
            let mut mj = self.m[j];
            if let Some((c, delta)) = m_shift {
                if c == j {
                    mj = mj + delta;
                }
            }
            let scale = mj / (sq.sqrt() + tau);
            for i in 0..wprime.rows {
                let r = wprime.at(i, j) * scale - self.target.at(i, j);
                loss = loss + r.square();
            }
        }
        loss.mul_f64(0.5)
    }

    /// Loss with entry `idx` (row-major) of parameter `id` moved by `delta`.
    pub fn shifted_loss(&self, id: ParamId, idx: usize, delta: Dd) -> Result<Dd> {
        let oob = || Error::Lookup(format!("{} has no entry {idx}", id.name()));
        let check = |len: usize| if idx < len { Ok(()) } else { Err(oob()) };
        let (b, a) = (&self.b, &self.a);
        match (&self.source, id) {
            (_, ParamId::M) => {
                check(self.m.len())?;
                Ok(self.loss_of(b, a, Some((idx, delta)), self.tau_raw))
            }
            (_, ParamId::TauRaw) => {
                check(1)?;
                Ok(self.loss_of(b, a, None, self.tau_raw + delta))
            }
            (Source::Direct, ParamId::B) => {
                check(b.data.len())?;
                let mut b = b.clone();
                b.data[idx] = b.data[idx] + delta;
                Ok(self.loss_of(&b, a, None, self.tau_raw))
            }
            (Source::Direct, ParamId::A) => {
                check(a.data.len())?;
                let mut a = a.clone();
                a.data[idx] = a.data[idx] + delta;
                Ok(self.loss_of(b, &a, None, self.tau_raw))
            }
            (Source::Hyper { slot, act, b: bb, a: ab }, id) => {
                let (nb, na) = match id {
                    ParamId::BEmbed => {
                        check(bb.embed.data.len())?;
                        (bb.shift_embed(idx, delta, *act), a.clone())
                    }
                    ParamId::W1B => {
                        check(bb.w1.data.len())?;
                        (bb.shift_w1(idx, delta, *act), a.clone())
                    }
                    ParamId::W2B(s) if s == *slot => {
                        check(bb.w2.data.len())?;
                        (bb.shift_w2(b, idx, delta), a.clone())
                    }
                    ParamId::AEmbed => {
                        check(ab.embed.data.len())?;
                        (b.clone(), ab.shift_embed(idx, delta, *act))
                    }
                    ParamId::W1A => {
                        check(ab.w1.data.len())?;
                        (b.clone(), ab.shift_w1(idx, delta, *act))
                    }
                    ParamId::W2A(s) if s == *slot => {
                        check(ab.w2.data.len())?;
                        (b.clone(), ab.shift_w2(a, idx, delta))
                    }
                    _ => return Err(Error::Lookup(format!("adapter has no parameter {}", id.name()))),
                };
                Ok(self.loss_of(&nb, &na, None, self.tau_raw))
            }
            (Source::Direct, _) => Err(Error::Lookup(format!("adapter has no parameter {}", id.name()))),
        }
    }

    /// Fourth-order central differences at `θ`, with `ε_i` from
    /// [`finite_diff_step`].
    pub fn gradient(&self, id: ParamId, theta: &[f64], rel_step: f64) -> Result<Vec<f64>> {
        if !(rel_step > 0.0) {
            return Err(Error::Config(format!("finite-difference step must be > 0, got {rel_step}")));
        }
        theta
            .par_iter()
            .enumerate()
            .map(|(i, &t)| {
                let eps = finite_diff_step(t, rel_step);
                let at = |k: f64| self.shifted_loss(id, i, Dd::from_f64(k * eps));
                let inner = at(1.0)? - at(-1.0)?;
                let outer = at(2.0)? - at(-2.0)?;
                Ok((inner.mul_f64(8.0) - outer).to_f64() / (12.0 * eps))
            })
            .collect()
    }
}
