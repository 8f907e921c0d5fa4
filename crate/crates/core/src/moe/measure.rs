//! Mixing measures and the regression functions they induce.
//!
//! Both structures share one evaluation form: for an input `x`,
//! `f(x) = Σ_j softmax_j(xᵀ G_k x + c_k) · E_j x`, with per-atom gate matrices
//! `G_k` and expert matrices `E_j`. Norms here are Frobenius norms of whole
//! matrices.

use serde::{Deserialize, Serialize};

use crate::codec::ParamDoc;
use crate::error::{Error, Result};
use crate::numeric::{dot, softmax, Activation, Matrix, SeededRng};

/// Pre-trained `C_Q, C_K, C_V`, fixed for an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenMatrices {
    pub c_q: Matrix,
    pub c_k: Matrix,
    pub c_v: Matrix,
}

impl FrozenMatrices {
    /// Gaussian draws rescaled to unit Frobenius norm.
    pub fn random(d: usize, rng: &mut SeededRng) -> Self {
        let mut unit = || {
            let g = rng.gaussian_matrix(d, d, 1.0);
            let n = g.frobenius_norm();
            g.scale(1.0 / n)
        };
        Self {
            c_q: unit(),
            c_k: unit(),
            c_v: unit(),
        }
    }

    pub fn d(&self) -> usize {
        self.c_q.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        for (name, c) in [("C_Q", &self.c_q), ("C_K", &self.c_k), ("C_V", &self.c_v)] {
            if c.shape() != (d, d) {
                return Err(Error::dim(
                    "FrozenMatrices",
                    format!("{name} {d}x{d}"),
                    format!("{:?}", c.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn to_doc(&self) -> ParamDoc {
        let mut doc = ParamDoc::new("frozen");
        doc.put_matrix("c_q", &self.c_q);
        doc.put_matrix("c_k", &self.c_k);
        doc.put_matrix("c_v", &self.c_v);
        doc
    }

    pub fn from_doc(doc: &ParamDoc) -> Result<Self> {
        doc.expect_structure("frozen")?;
        let f = Self {
            c_q: doc.matrix("c_q")?,
            c_k: doc.matrix("c_k")?,
            c_v: doc.matrix("c_v")?,
        };
        f.validate()?;
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonSharedAtom {
    pub c: f64,
    pub b_q: Matrix,
    pub a_q: Matrix,
    pub b_v: Matrix,
    pub a_v: Matrix,
    pub m_q: f64,
    pub m_v: f64,
}

impl NonSharedAtom {
    /// `(B_Q, A_Q, B_V, A_V)`, the coordinates Voronoi cells are built on.
    pub fn factors(&self) -> [&Matrix; 4] {
        [&self.b_q, &self.a_q, &self.b_v, &self.a_v]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonSharedMeasure {
    pub atoms: Vec<NonSharedAtom>,
}

/// Shared atom: adapted product `σ₂(W₂B) · σ₁(W₁A)` used by both projections.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedAtom {
    pub c: f64,
    /// d × m′
    pub w2: Matrix,
    /// m′ × r
    pub b: Matrix,
    /// r × m
    pub w1: Matrix,
    /// m × d
    pub a: Matrix,
    pub m_q: f64,
    pub m_v: f64,
}

impl SharedAtom {
    /// Atom given directly by its products, i.e. `W₂ = I`, `W₁ = I`.
    pub fn from_products(c: f64, u: Matrix, v: Matrix) -> Self {
        Self {
            c,
            w2: Matrix::identity(u.rows()),
            w1: Matrix::identity(v.rows()),
            b: u,
            a: v,
            m_q: 1.0,
            m_v: 1.0,
        }
    }

    /// `W₂B`, d × r.
    pub fn u(&self) -> Result<Matrix> {
        self.w2.matmul(&self.b)
    }

    /// `W₁A`, r × d.
    pub fn v(&self) -> Result<Matrix> {
        self.w1.matmul(&self.a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedMeasure {
    pub atoms: Vec<SharedAtom>,
    pub tau_q: f64,
    pub tau_v: f64,
    pub sigma1: Activation,
    pub sigma2: Activation,
}

impl SharedMeasure {
    pub fn adapted_product(&self, atom: &SharedAtom) -> Result<Matrix> {
        let u = self.sigma2.forward(&atom.u()?);
        let v = self.sigma1.forward(&atom.v()?);
        u.matmul(&v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureKind {
    NonShared,
    Shared,
}

impl MeasureKind {
    pub fn tag(self) -> &'static str {
        match self {
            MeasureKind::NonShared => "non-shared",
            MeasureKind::Shared => "shared",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "non-shared" | "nonshared" => Ok(MeasureKind::NonShared),
            "shared" => Ok(MeasureKind::Shared),
            other => Err(Error::Config(format!("unknown measure kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MixingMeasure {
    NonShared(NonSharedMeasure),
    Shared(SharedMeasure),
}

impl MixingMeasure {
    pub fn kind(&self) -> MeasureKind {
        match self {
            MixingMeasure::NonShared(_) => MeasureKind::NonShared,
            MixingMeasure::Shared(_) => MeasureKind::Shared,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            MixingMeasure::NonShared(g) => g.atoms.len(),
            MixingMeasure::Shared(g) => g.atoms.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gate_biases(&self) -> Vec<f64> {
        match self {
            MixingMeasure::NonShared(g) => g.atoms.iter().map(|a| a.c).collect(),
            MixingMeasure::Shared(g) => g.atoms.iter().map(|a| a.c).collect(),
        }
    }

    pub fn compile(&self, frozen: &FrozenMatrices) -> Result<CompiledMoe> {
        match self {
            MixingMeasure::NonShared(g) => compile_nonshared(g, frozen),
            MixingMeasure::Shared(g) => compile_shared(g, frozen),
        }
    }

    pub fn eval(&self, frozen: &FrozenMatrices, x: &[f64]) -> Result<Vec<f64>> {
        self.compile(frozen)?.eval(x)
    }

    /// Same function, atoms reordered: `out[i] = self[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(Error::dim("MixingMeasure::permuted", self.len(), perm.len()));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Config(format!("{perm:?} is not a permutation")));
            }
        }
        Ok(match self {
            MixingMeasure::NonShared(g) => MixingMeasure::NonShared(NonSharedMeasure {
                atoms: perm.iter().map(|&p| g.atoms[p].clone()).collect(),
            }),
            MixingMeasure::Shared(g) => MixingMeasure::Shared(SharedMeasure {
                atoms: perm.iter().map(|&p| g.atoms[p].clone()).collect(),
                ..g.clone()
            }),
        })
    }

    /// Largest absolute entry over all atom factors (excluding `c`).
    pub fn max_abs_factor(&self) -> Result<f64> {
        Ok(match self {
            MixingMeasure::NonShared(g) => g
                .atoms
                .iter()
                .flat_map(|a| a.factors())
                .fold(0.0, |m, f| m.max(f.max_abs())),
            MixingMeasure::Shared(g) => {
                let mut m: f64 = 0.0;
                for a in &g.atoms {
                    m = m.max(a.u()?.max_abs()).max(a.v()?.max_abs());
                }
                m
            }
        })
    }

    pub fn to_doc(&self) -> ParamDoc {
        let mut doc = ParamDoc::new(self.kind().tag());
        doc.put_topology("atoms", self.len());
        match self {
            MixingMeasure::NonShared(g) => {
                for (j, a) in g.atoms.iter().enumerate() {
                    doc.put_scalar(format!("{j}.c"), a.c);
                    doc.put_scalar(format!("{j}.m_q"), a.m_q);
                    doc.put_scalar(format!("{j}.m_v"), a.m_v);
                    doc.put_matrix(format!("{j}.b_q"), &a.b_q);
                    doc.put_matrix(format!("{j}.a_q"), &a.a_q);
                    doc.put_matrix(format!("{j}.b_v"), &a.b_v);
                    doc.put_matrix(format!("{j}.a_v"), &a.a_v);
                }
            }
            MixingMeasure::Shared(g) => {
                doc.put_scalar("tau_q", g.tau_q);
                doc.put_scalar("tau_v", g.tau_v);
                doc.put_topology("sigma1", g.sigma1.tag());
                doc.put_topology("sigma2", g.sigma2.tag());
                for (j, a) in g.atoms.iter().enumerate() {
                    doc.put_scalar(format!("{j}.c"), a.c);
                    doc.put_scalar(format!("{j}.m_q"), a.m_q);
                    doc.put_scalar(format!("{j}.m_v"), a.m_v);
                    doc.put_matrix(format!("{j}.w2"), &a.w2);
                    doc.put_matrix(format!("{j}.b"), &a.b);
                    doc.put_matrix(format!("{j}.w1"), &a.w1);
                    doc.put_matrix(format!("{j}.a"), &a.a);
                }
            }
        }
        doc
    }

    pub fn from_doc(doc: &ParamDoc) -> Result<Self> {
        let kind = MeasureKind::parse(&doc.structure)?;
        doc.expect_structure(kind.tag())?;
        let n = doc.topology_usize("atoms")?;
        Ok(match kind {
            MeasureKind::NonShared => MixingMeasure::NonShared(NonSharedMeasure {
                atoms: (0..n)
                    .map(|j| {
                        Ok(NonSharedAtom {
                            c: doc.scalar(&format!("{j}.c"))?,
                            m_q: doc.scalar(&format!("{j}.m_q"))?,
                            m_v: doc.scalar(&format!("{j}.m_v"))?,
                            b_q: doc.matrix(&format!("{j}.b_q"))?,
                            a_q: doc.matrix(&format!("{j}.a_q"))?,
                            b_v: doc.matrix(&format!("{j}.b_v"))?,
                            a_v: doc.matrix(&format!("{j}.a_v"))?,
                        })
                    })
                    .collect::<Result<_>>()?,
            }),
            MeasureKind::Shared => MixingMeasure::Shared(SharedMeasure {
                tau_q: doc.scalar("tau_q")?,
                tau_v: doc.scalar("tau_v")?,
                sigma1: Activation::parse(doc.topology_str("sigma1")?)?,
                sigma2: Activation::parse(doc.topology_str("sigma2")?)?,
                atoms: (0..n)
                    .map(|j| {
                        Ok(SharedAtom {
                            c: doc.scalar(&format!("{j}.c"))?,
                            m_q: doc.scalar(&format!("{j}.m_q"))?,
                            m_v: doc.scalar(&format!("{j}.m_v"))?,
                            w2: doc.matrix(&format!("{j}.w2"))?,
                            b: doc.matrix(&format!("{j}.b"))?,
                            w1: doc.matrix(&format!("{j}.w1"))?,
                            a: doc.matrix(&format!("{j}.a"))?,
                        })
                    })
                    .collect::<Result<_>>()?,
            }),
        })
    }
}

/// Gate and expert matrices of a measure, ready for repeated evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledMoe {
    /// `G_k`: the logit of atom `k` is `xᵀ G_k x + c_k`.
    pub gate: Vec<Matrix>,
    pub bias: Vec<f64>,
    /// `E_j`: expert `j` maps `x ↦ E_j x`.
    pub expert: Vec<Matrix>,
}

impl CompiledMoe {
    pub fn gates(&self, x: &[f64]) -> Result<Vec<f64>> {
        let logits = self
            .gate
            .iter()
            .zip(&self.bias)
            .map(|(g, c)| Ok(dot(x, &g.matvec(x)?) + c))
            .collect::<Result<Vec<_>>>()?;
        Ok(softmax(&logits))
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let gates = self.gates(x)?;
        let mut out = vec![0.0; x.len()];
        for (g, e) in gates.iter().zip(&self.expert) {
            for (o, v) in out.iter_mut().zip(e.matvec(x)?) {
                *o += g * v;
            }
        }
        Ok(out)
    }
}

fn normalized(c: &Matrix, p: &Matrix, m: f64, tau: f64, op: &'static str) -> Result<Matrix> {
    let sum = c.add(p)?;
    let denom = sum.frobenius_norm() + tau;
    if denom == 0.0 {
        return Err(Error::Singularity {
            op,
            detail: "adapted matrix has zero Frobenius norm".into(),
        });
    }
    Ok(sum.scale(m / denom))
}

fn compile_nonshared(g: &NonSharedMeasure, fz: &FrozenMatrices) -> Result<CompiledMoe> {
    fz.validate()?;
    let mut out = CompiledMoe {
        gate: Vec::with_capacity(g.atoms.len()),
        bias: Vec::with_capacity(g.atoms.len()),
        expert: Vec::with_capacity(g.atoms.len()),
    };
    for a in &g.atoms {
        let pq = a.b_q.matmul(&a.a_q)?;
        let pv = a.b_v.matmul(&a.a_v)?;
        let q = normalized(&fz.c_q, &pq, a.m_q, 0.0, "f_nonshared")?;
        out.gate.push(q.matmul(&fz.c_k)?);
        out.bias.push(a.c);
        out.expert
            .push(normalized(&fz.c_v, &pv, a.m_v, 0.0, "f_nonshared")?);
    }
    Ok(out)
}

fn compile_shared(g: &SharedMeasure, fz: &FrozenMatrices) -> Result<CompiledMoe> {
    fz.validate()?;
    if !(g.tau_q > 0.0 && g.tau_v > 0.0) {
        return Err(Error::Config("shared measure needs tau_q, tau_v > 0".into()));
    }
    let mut out = CompiledMoe {
        gate: Vec::with_capacity(g.atoms.len()),
        bias: Vec::with_capacity(g.atoms.len()),
        expert: Vec::with_capacity(g.atoms.len()),
    };
    for a in &g.atoms {
        let p = g.adapted_product(a)?;
        let q = normalized(&fz.c_q, &p, a.m_q, g.tau_q, "f_shared")?;
        out.gate.push(q.matmul(&fz.c_k)?);
        out.bias.push(a.c);
        out.expert
            .push(normalized(&fz.c_v, &p, a.m_v, g.tau_v, "f_shared")?);
    }
    Ok(out)
}

pub fn f_nonshared(g: &NonSharedMeasure, fz: &FrozenMatrices, x: &[f64]) -> Result<Vec<f64>> {
    compile_nonshared(g, fz)?.eval(x)
}

pub fn f_shared(g: &SharedMeasure, fz: &FrozenMatrices, x: &[f64]) -> Result<Vec<f64>> {
    compile_shared(g, fz)?.eval(x)
}

/// Shapes of a measure's factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasureDims {
    pub d: usize,
    pub r: usize,
    /// Inner width `m′` of `W₂ B` (shared only).
    pub inner_b: usize,
    /// Inner width `m` of `W₁ A` (shared only).
    pub inner_a: usize,
}

/// Random non-shared measure with factor entries uniform in `[−range, range]`
/// and gate biases uniform in `[−½, ½]`.
pub fn random_nonshared(
    atoms: usize,
    dims: MeasureDims,
    range: f64,
    rng: &mut SeededRng,
) -> NonSharedMeasure {
    let (d, r) = (dims.d, dims.r);
    NonSharedMeasure {
        atoms: (0..atoms)
            .map(|_| NonSharedAtom {
                c: rng.uniform_range(-0.5, 0.5),
                b_q: rng.uniform_matrix(d, r, -range, range),
                a_q: rng.uniform_matrix(r, d, -range, range),
                b_v: rng.uniform_matrix(d, r, -range, range),
                a_v: rng.uniform_matrix(r, d, -range, range),
                m_q: 1.0,
                m_v: 1.0,
            })
            .collect(),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn random_shared(
    atoms: usize,
    dims: MeasureDims,
    range: f64,
    tau_q: f64,
    tau_v: f64,
    sigma1: Activation,
    sigma2: Activation,
    rng: &mut SeededRng,
) -> SharedMeasure {
    let (d, r) = (dims.d, dims.r);
    SharedMeasure {
        atoms: (0..atoms)
            .map(|_| SharedAtom {
                c: rng.uniform_range(-0.5, 0.5),
                w2: rng.uniform_matrix(d, dims.inner_b, -range, range),
                b: rng.uniform_matrix(dims.inner_b, r, -range, range),
                w1: rng.uniform_matrix(r, dims.inner_a, -range, range),
                a: rng.uniform_matrix(dims.inner_a, d, -range, range),
                m_q: 1.0,
                m_v: 1.0,
            })
            .collect(),
        tau_q,
        tau_v,
        sigma1,
        sigma2,
    }
}
