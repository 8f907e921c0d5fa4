//! Voronoi cells of a fitted measure around the true atoms, the losses built
//! on them, and the canonicalization applied before comparing a fit to truth.

use crate::error::{Error, Result};
use crate::moe::{MixingMeasure, NonSharedAtom, SharedAtom};
use crate::numeric::{invert, solve_spd, Activation, Matrix};

/// `cells[j]` holds the fitted atoms nearest to true atom `j`;
/// `owner[i]` is the cell of fitted atom `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoronoiCells {
    pub cells: Vec<Vec<usize>>,
    pub owner: Vec<usize>,
}

/// Per-atom coordinates: `(B_Q, A_Q, B_V, A_V)` for non-shared atoms,
/// `(W₂B, W₁A)` for shared atoms.
pub fn atom_coordinates(g: &MixingMeasure) -> Result<Vec<Vec<Matrix>>> {
    match g {
        MixingMeasure::NonShared(m) => Ok(m
            .atoms
            .iter()
            .map(|a| a.factors().into_iter().cloned().collect())
            .collect()),
        MixingMeasure::Shared(m) => m.atoms.iter().map(|a| Ok(vec![a.u()?, a.v()?])).collect(),
    }
}

fn same_kind(fit: &MixingMeasure, truth: &MixingMeasure, op: &str) -> Result<()> {
    if fit.kind() != truth.kind() {
        return Err(Error::Precondition(format!(
            "{op}: mismatched structure kinds {} vs {}",
            fit.kind().tag(),
            truth.kind().tag()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Precondition(format!("{op}: true measure has no atoms")));
    }
    Ok(())
}

fn sq_dist(a: &[Matrix], b: &[Matrix]) -> Result<f64> {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        x.same_shape(y, "voronoi distance")?;
        s += x
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(u, v)| (u - v) * (u - v))
            .sum::<f64>();
    }
    Ok(s)
}

/// Nearest true atom per fitted atom; ties go to the smallest index.
pub fn voronoi_assign(fit: &MixingMeasure, truth: &MixingMeasure) -> Result<VoronoiCells> {
    same_kind(fit, truth, "voronoi_assign")?;
    let h = atom_coordinates(fit)?;
    let h_star = atom_coordinates(truth)?;
    let mut cells = vec![Vec::new(); h_star.len()];
    let mut owner = Vec::with_capacity(h.len());
    for (i, hi) in h.iter().enumerate() {
        let mut best = (f64::INFINITY, 0);
        for (j, hj) in h_star.iter().enumerate() {
            let dist = sq_dist(hi, hj)?;
            if dist < best.0 {
                best = (dist, j);
            }
        }
        cells[best.1].push(i);
        owner.push(best.1);
    }
    Ok(VoronoiCells { cells, owner })
}

/// Sum in ascending order, so the result does not depend on atom order.
fn ordered_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

fn weight_terms(cells: &VoronoiCells, c: &[f64], c_star: &[f64]) -> Vec<f64> {
    cells
        .cells
        .iter()
        .zip(c_star)
        .map(|(cell, cs)| (ordered_sum(cell.iter().map(|&i| c[i].exp()).collect()) - cs.exp()).abs())
        .collect()
}

/// `Σ_j |Σ_{i∈V_j} e^{c_i} − e^{c*_j}| + Σ_j Σ_{i∈V_j} e^{c_i} Σ_{factors} ‖Δ‖^r`.
pub fn loss_d1r(fit: &MixingMeasure, truth: &MixingMeasure, r: u32) -> Result<f64> {
    same_kind(fit, truth, "loss_d1r")?;
    if !matches!(fit, MixingMeasure::NonShared(_)) {
        return Err(Error::Precondition(
            "loss_d1r: requires non-shared measures".into(),
        ));
    }
    if r == 0 {
        return Err(Error::Config("loss_d1r needs r >= 1".into()));
    }
    let cells = voronoi_assign(fit, truth)?;
    let (c, c_star) = (fit.gate_biases(), truth.gate_biases());
    let (h, h_star) = (atom_coordinates(fit)?, atom_coordinates(truth)?);
    let mut terms = weight_terms(&cells, &c, &c_star);
    for (j, cell) in cells.cells.iter().enumerate() {
        for &i in cell {
            let mut s = 0.0;
            for (a, b) in h[i].iter().zip(&h_star[j]) {
                s += a.sub(b)?.frobenius_norm().powi(r as i32);
            }
            terms.push(c[i].exp() * s);
        }
    }
    Ok(ordered_sum(terms))
}

/// Weight term, plus `e^{c_i}(‖Δ(W₂B)‖ + ‖Δ(W₁A)‖)` over singleton cells and
/// `e^{c_i}(‖Δ(W₂B)‖² + ‖Δ(W₁A)‖²)` over cells with more than one atom.
pub fn loss_d2(fit: &MixingMeasure, truth: &MixingMeasure) -> Result<f64> {
    same_kind(fit, truth, "loss_d2")?;
    if !matches!(fit, MixingMeasure::Shared(_)) {
        return Err(Error::Precondition("loss_d2: requires shared measures".into()));
    }
    let cells = voronoi_assign(fit, truth)?;
    let (c, c_star) = (fit.gate_biases(), truth.gate_biases());
    let (h, h_star) = (atom_coordinates(fit)?, atom_coordinates(truth)?);
    let mut terms = weight_terms(&cells, &c, &c_star);
    for (j, cell) in cells.cells.iter().enumerate() {
        let power = if cell.len() == 1 { 1 } else { 2 };
        for &i in cell {
            let mut s = 0.0;
            for (a, b) in h[i].iter().zip(&h_star[j]) {
                s += a.sub(b)?.frobenius_norm().powi(power);
            }
            terms.push(c[i].exp() * s);
        }
    }
    Ok(ordered_sum(terms))
}

/// Adds one constant to every `c_i` so that `Σ e^{c_i} = Σ e^{c*_j}`.
/// The regression function is unchanged.
pub fn match_gate_mass(fit: &MixingMeasure, truth: &MixingMeasure) -> MixingMeasure {
    let lse = |c: &[f64]| {
        let m = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + c.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
    };
    let shift = lse(&truth.gate_biases()) - lse(&fit.gate_biases());
    let mut out = fit.clone();
    match &mut out {
        MixingMeasure::NonShared(g) => g.atoms.iter_mut().for_each(|a| a.c += shift),
        MixingMeasure::Shared(g) => g.atoms.iter_mut().for_each(|a| a.c += shift),
    }
    out
}

/// Reparameterizations of the rank index that leave `σ₂(U)·σ₁(V)` unchanged:
/// `U ↦ σ₂⁻¹(σ₂(U) R)`, `V ↦ σ₁⁻¹(R⁻¹ σ₁(V))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignGroup {
    /// Signed permutations `R`; these commute with odd activations.
    SignedPermutation,
    /// Any invertible `R`. Exact for every invertible entrywise activation.
    GeneralLinear,
}

fn signed_permutations(r: usize) -> Vec<Matrix> {
    let mut perms = vec![vec![]];
    for _ in 0..r {
        perms = perms
            .into_iter()
            .flat_map(|p: Vec<usize>| {
                (0..r)
                    .filter(|k| !p.contains(k))
                    .map(|k| {
                        let mut q = p.clone();
                        q.push(k);
                        q
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
    }
    let mut out = Vec::new();
    for p in &perms {
        for mask in 0..1usize << r {
            let mut m = Matrix::zeros(r, r);
            for (i, &j) in p.iter().enumerate() {
                m.set(i, j, if mask >> i & 1 == 1 { -1.0 } else { 1.0 });
            }
            out.push(m);
        }
    }
    out
}

/// A factor pair `(U, V)` with product `σ_u(U)·σ_v(V)` and its alignment target.
struct PairTarget<'a> {
    u_img: Matrix,
    v_img: Matrix,
    u_star: &'a Matrix,
    v_star: &'a Matrix,
    sigma_u: Activation,
    sigma_v: Activation,
}

impl PairTarget<'_> {
    fn moved(&self, rot: &Matrix) -> Result<(Matrix, Matrix)> {
        let u = self.u_img.matmul(rot)?.map(|y| self.sigma_u.inverse(y));
        let v = invert(rot)?.matmul(&self.v_img)?.map(|y| self.sigma_v.inverse(y));
        Ok((u, v))
    }

    fn residual(&self, rot: &Matrix) -> Result<Vec<f64>> {
        let (u, v) = self.moved(rot)?;
        let mut res = u.sub(self.u_star)?.into_vec();
        res.extend(v.sub(self.v_star)?.into_vec());
        Ok(res)
    }

    fn cost(&self, rot: &Matrix) -> Result<f64> {
        Ok(self.residual(rot)?.iter().map(|v| v * v).sum())
    }

    /// Levenberg–Marquardt on the squared distance, Jacobian by central
    /// differences in the `r²` entries of `R`.
    fn refine(&self, start: Matrix) -> Result<Matrix> {
        let r = start.rows();
        let mut rot = start;
        let mut res = self.residual(&rot)?;
        let mut cost: f64 = res.iter().map(|v| v * v).sum();
        let mut lambda = 1e-3;
        for _ in 0..100 {
            let mut jac = Matrix::zeros(res.len(), r * r);
            for p in 0..r * r {
                let h = 1e-7 * rot.as_slice()[p].abs().max(1.0);
                let mut up = rot.clone();
                up.as_mut_slice()[p] += h;
                let mut dn = rot.clone();
                dn.as_mut_slice()[p] -= h;
                let (ru, rd) = match (self.residual(&up), self.residual(&dn)) {
                    (Ok(a), Ok(b)) => (a, b),
                    _ => return Ok(rot),
                };
                for (i, (a, b)) in ru.iter().zip(&rd).enumerate() {
                    jac.set(i, p, (a - b) / (2.0 * h));
                }
            }
            let jtj = jac.t_matmul(&jac)?;
            let neg: Vec<f64> = jac
                .t_matmul(&Matrix::column_vector(&res))?
                .into_vec()
                .into_iter()
                .map(|v| -v)
                .collect();
            let mut improved = false;
            while lambda < 1e10 {
                let mut sys = jtj.clone();
                for i in 0..r * r {
                    sys.set(i, i, sys.get(i, i) + lambda * (1.0 + jtj.get(i, i)));
                }
                let step = solve_spd(&sys, &neg)?;
                let cand = Matrix::from_vec(
                    r,
                    r,
                    rot.as_slice().iter().zip(&step).map(|(x, s)| x + s).collect(),
                )?;
                if let Ok(cres) = self.residual(&cand) {
                    let c: f64 = cres.iter().map(|v| v * v).sum();
                    if c < cost {
                        improved = cost - c > 1e-14 * cost;
                        rot = cand;
                        res = cres;
                        cost = c;
                        lambda = (lambda / 3.0).max(1e-12);
                        break;
                    }
                }
                lambda *= 4.0;
            }
            if !improved {
                break;
            }
        }
        Ok(rot)
    }

    fn align(&self, group: AlignGroup) -> Result<(Matrix, Matrix, f64)> {
        let r = self.u_img.cols();
        let mut best: Option<(Matrix, f64)> = None;
        for g in signed_permutations(r) {
            let c = self.cost(&g)?;
            if best.as_ref().is_none_or(|(_, bc)| c < *bc) {
                best = Some((g, c));
            }
        }
        let (mut rot, _) = best.expect("at least the identity");
        if group == AlignGroup::GeneralLinear {
            rot = self.refine(rot)?;
        }
        let (u, v) = self.moved(&rot)?;
        let c = self.cost(&rot)?;
        Ok((u, v, c))
    }
}

fn align_factors(
    u: &Matrix,
    v: &Matrix,
    u_star: &Matrix,
    v_star: &Matrix,
    sigma_u: Activation,
    sigma_v: Activation,
    group: AlignGroup,
) -> Result<(Matrix, Matrix, f64)> {
    PairTarget {
        u_img: sigma_u.forward(u),
        v_img: sigma_v.forward(v),
        u_star,
        v_star,
        sigma_u,
        sigma_v,
    }
    .align(group)
}

/// Moves every fitted atom to the point of its symmetry orbit closest to some
/// true atom. Non-shared atoms align query and value factors independently;
/// shared atoms align `(W₂B, W₁A)` through the activations and are stored in
/// product form.
pub fn align_atoms(
    fit: &MixingMeasure,
    truth: &MixingMeasure,
    group: AlignGroup,
) -> Result<MixingMeasure> {
    same_kind(fit, truth, "align_atoms")?;
    let id = Activation::Identity;
    match (fit, truth) {
        (MixingMeasure::NonShared(f), MixingMeasure::NonShared(t)) => {
            let mut out = f.clone();
            for atom in &mut out.atoms {
                let mut best: Option<(NonSharedAtom, f64)> = None;
                for ts in &t.atoms {
                    let (bq, aq, cq) =
                        align_factors(&atom.b_q, &atom.a_q, &ts.b_q, &ts.a_q, id, id, group)?;
                    let (bv, av, cv) =
                        align_factors(&atom.b_v, &atom.a_v, &ts.b_v, &ts.a_v, id, id, group)?;
                    if best.as_ref().is_none_or(|(_, c)| cq + cv < *c) {
                        let cand = NonSharedAtom {
                            b_q: bq,
                            a_q: aq,
                            b_v: bv,
                            a_v: av,
                            ..atom.clone()
                        };
                        best = Some((cand, cq + cv));
                    }
                }
                *atom = best.expect("true measure has atoms").0;
            }
            Ok(MixingMeasure::NonShared(out))
        }
        (MixingMeasure::Shared(f), MixingMeasure::Shared(t)) => {
            let mut out = f.clone();
            let truth_uv = t
                .atoms
                .iter()
                .map(|a| Ok((a.u()?, a.v()?)))
                .collect::<Result<Vec<_>>>()?;
            for atom in &mut out.atoms {
                let (u, v) = (atom.u()?, atom.v()?);
                let mut best: Option<(Matrix, Matrix, f64)> = None;
                for (us, vs) in &truth_uv {
                    let cand = align_factors(&u, &v, us, vs, f.sigma2, f.sigma1, group)?;
                    if best.as_ref().is_none_or(|b| cand.2 < b.2) {
                        best = Some(cand);
                    }
                }
                let (u, v, _) = best.expect("true measure has atoms");
                *atom = SharedAtom {
                    m_q: atom.m_q,
                    m_v: atom.m_v,
                    ..SharedAtom::from_products(atom.c, u, v)
                };
            }
            Ok(MixingMeasure::Shared(out))
        }
        _ => unreachable!("kinds checked above"),
    }
}

/// Gate-mass matching followed by alignment over the full invertible group.
pub fn canonicalize(fit: &MixingMeasure, truth: &MixingMeasure) -> Result<MixingMeasure> {
    align_atoms(&match_gate_mass(fit, truth), truth, AlignGroup::GeneralLinear)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{
        random_nonshared, random_shared, FrozenMatrices, MeasureDims, NonSharedMeasure,
    };
    use crate::numeric::SeededRng;

    fn dims() -> MeasureDims {
        MeasureDims {
            d: 4,
            r: 2,
            inner_b: 3,
            inner_a: 3,
        }
    }

    fn ns(rng: &mut SeededRng, l: usize) -> MixingMeasure {
        MixingMeasure::NonShared(random_nonshared(l, dims(), 1.0, rng))
    }

    fn sh(rng: &mut SeededRng, l: usize) -> MixingMeasure {
        MixingMeasure::Shared(random_shared(
            l,
            dims(),
            1.0,
            0.5,
            0.5,
            Activation::Tanh,
            Activation::Tanh,
            rng,
        ))
    }

    /// Plain transcription over flattened coordinates.
    fn naive_loss(fit: &MixingMeasure, truth: &MixingMeasure, r: Option<i32>) -> f64 {
        let flat = |g: &MixingMeasure| -> Vec<Vec<Vec<f64>>> {
            atom_coordinates(g)
                .unwrap()
                .into_iter()
                .map(|h| h.into_iter().map(Matrix::into_vec).collect())
                .collect()
        };
        let (h, hs) = (flat(fit), flat(truth));
        let (c, cs) = (fit.gate_biases(), truth.gate_biases());
        let dist2 = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> f64 {
            let mut s = 0.0;
            for (x, y) in a.iter().zip(b) {
                for (u, v) in x.iter().zip(y) {
                    s += (u - v) * (u - v);
                }
            }
            s
        };
        let mut cells: Vec<Vec<usize>> = vec![vec![]; hs.len()];
        for i in 0..h.len() {
            let mut j_best = 0;
            for j in 1..hs.len() {
                if dist2(&h[i], &hs[j]) < dist2(&h[i], &hs[j_best]) {
                    j_best = j;
                }
            }
            cells[j_best].push(i);
        }
        let mut total = 0.0;
        for j in 0..hs.len() {
            let mass: f64 = cells[j].iter().map(|&i| c[i].exp()).sum();
            total += (mass - cs[j].exp()).abs();
            let p = r.unwrap_or(if cells[j].len() == 1 { 1 } else { 2 });
            for &i in &cells[j] {
                for (x, y) in h[i].iter().zip(&hs[j]) {
                    let n = x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
                    total += c[i].exp() * n.powi(p);
                }
            }
        }
        total
    }

    #[test]
    fn exact_recovery_gives_singletons_and_zero_loss() {
        let mut rng = SeededRng::new(1);
        let g = ns(&mut rng, 3);
        let cells = voronoi_assign(&g, &g).unwrap();
        assert_eq!(cells.cells, vec![vec![0], vec![1], vec![2]]);
        assert_eq!(loss_d1r(&g, &g, 2).unwrap(), 0.0);
        let s = sh(&mut rng, 2);
        assert_eq!(loss_d2(&s, &s).unwrap(), 0.0);
        assert!(loss_d2(&g, &s).is_err());
        assert!(loss_d1r(&s, &s, 1).is_err());
    }

    #[test]
    fn ties_go_to_smallest_index() {
        let mut rng = SeededRng::new(2);
        let MixingMeasure::NonShared(mut truth) = ns(&mut rng, 2) else {
            unreachable!()
        };
        let mut mid = truth.atoms[0].clone();
        let zero = Matrix::zeros(4, 2);
        truth.atoms[0].b_q = zero.clone();
        truth.atoms[1] = truth.atoms[0].clone();
        truth.atoms[1].b_q = zero.map(|_| 2.0);
        mid.b_q = zero.map(|_| 1.0);
        mid.a_q = truth.atoms[0].a_q.clone();
        mid.b_v = truth.atoms[0].b_v.clone();
        mid.a_v = truth.atoms[0].a_v.clone();
        let fit = MixingMeasure::NonShared(NonSharedMeasure { atoms: vec![mid] });
        let cells = voronoi_assign(&fit, &MixingMeasure::NonShared(truth)).unwrap();
        assert_eq!(cells.owner, vec![0]);
    }

    #[test]
    fn single_factor_perturbation_is_isolated() {
        let mut rng = SeededRng::new(3);
        let truth = ns(&mut rng, 2);
        let MixingMeasure::NonShared(mut fit) = truth.clone() else {
            unreachable!()
        };
        let e = rng.gaussian_matrix(4, 2, 0.01);
        fit.atoms[1].b_q = fit.atoms[1].b_q.add(&e).unwrap();
        let c1 = fit.atoms[1].c;
        let fit = MixingMeasure::NonShared(fit);
        for r in 1..4 {
            let got = loss_d1r(&fit, &truth, r).unwrap();
            let expect = c1.exp() * e.frobenius_norm().powi(r as i32);
            assert!((got - expect).abs() < 1e-15 * expect.max(1.0));
        }
    }

    #[test]
    fn matches_naive_losses_and_brute_force_cells() {
        let mut rng = SeededRng::new(4);
        for _ in 0..30 {
            let (t, f) = (ns(&mut rng, 2), ns(&mut rng, 5));
            for r in 1..=3 {
                let got = loss_d1r(&f, &t, r).unwrap();
                assert!((got - naive_loss(&f, &t, Some(r as i32))).abs() < 1e-12);
            }
            let h = atom_coordinates(&f).unwrap();
            let hs = atom_coordinates(&t).unwrap();
            let cells = voronoi_assign(&f, &t).unwrap();
            for (i, hi) in h.iter().enumerate() {
                let d: Vec<f64> = hs.iter().map(|hj| sq_dist(hi, hj).unwrap()).collect();
                let j = if d[1] < d[0] { 1 } else { 0 };
                assert_eq!(cells.owner[i], j);
            }
            let (t, f) = (sh(&mut rng, 2), sh(&mut rng, 4));
            let got = loss_d2(&f, &t).unwrap();
            assert!((got - naive_loss(&f, &t, None)).abs() < 1e-12);
        }
    }

    #[test]
    fn non_singleton_cells_use_squares() {
        let mut rng = SeededRng::new(5);
        let truth = sh(&mut rng, 2);
        let MixingMeasure::Shared(mut fit) = truth.clone() else {
            unreachable!()
        };
        let mut extra = fit.atoms[0].clone();
        extra.b = extra.b.map(|v| v * 1.01);
        fit.atoms.push(extra);
        let t = &truth;
        let f = MixingMeasure::Shared(fit.clone());
        let cells = voronoi_assign(&f, t).unwrap();
        assert_eq!(cells.cells[0], vec![0, 2]);
        let du = fit.atoms[2].u().unwrap().sub(&fit.atoms[0].u().unwrap()).unwrap();
        let c = fit.atoms[0].c.exp();
        let expect = c + c * du.frobenius_norm().powi(2);
        assert!((loss_d2(&f, t).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn losses_invariant_to_atom_permutation() {
        let mut rng = SeededRng::new(6);
        let (t, f) = (ns(&mut rng, 2), ns(&mut rng, 4));
        let (ts, fs) = (sh(&mut rng, 2), sh(&mut rng, 4));
        let base = loss_d1r(&f, &t, 2).unwrap();
        let base2 = loss_d2(&fs, &ts).unwrap();
        let cells = voronoi_assign(&f, &t).unwrap();
        for _ in 0..100 {
            let mut p: Vec<usize> = (0..4).collect();
            rng.shuffle(&mut p);
            let pf = f.permuted(&p).unwrap();
            let permuted_cells = voronoi_assign(&pf, &t).unwrap();
            for (i, &pi) in p.iter().enumerate() {
                assert_eq!(permuted_cells.owner[i], cells.owner[pi]);
            }
            let mut q: Vec<usize> = (0..2).collect();
            rng.shuffle(&mut q);
            assert_eq!(loss_d1r(&pf, &t.permuted(&q).unwrap(), 2).unwrap(), base);
            assert_eq!(loss_d2(&fs.permuted(&p).unwrap(), &ts.permuted(&q).unwrap()).unwrap(), base2);
        }
    }

    #[test]
    fn canonicalize_undoes_symmetries() {
        let mut rng = SeededRng::new(7);
        let fz = FrozenMatrices::random(4, &mut rng);
        let truth = ns(&mut rng, 2);
        let MixingMeasure::NonShared(mut moved) = truth.clone() else {
            unreachable!()
        };
        for a in &mut moved.atoms {
            let r = rng.gaussian_matrix(2, 2, 1.0).add(&Matrix::identity(2).scale(2.0)).unwrap();
            let ri = invert(&r).unwrap();
            a.b_q = a.b_q.matmul(&r).unwrap();
            a.a_q = ri.matmul(&a.a_q).unwrap();
            a.c += 0.7;
        }
        let moved = MixingMeasure::NonShared(moved);
        let x = rng.uniform_ball(4, 1.0);
        let (fa, fb) = (truth.eval(&fz, &x).unwrap(), moved.eval(&fz, &x).unwrap());
        for (a, b) in fa.iter().zip(&fb) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(loss_d1r(&moved, &truth, 2).unwrap() > 1e-3);
        let canon = canonicalize(&moved, &truth).unwrap();
        assert!(loss_d1r(&canon, &truth, 2).unwrap() < 1e-9);

        let MixingMeasure::Shared(t) = sh(&mut rng, 2) else {
            unreachable!()
        };
        let mix = Matrix::from_rows(&[&[0.9, -0.2], &[0.15, 1.1]]);
        let mix_inv = invert(&mix).unwrap();
        let mut moved = t.clone();
        for a in &mut moved.atoms {
            let (u, v) = (a.u().unwrap(), a.v().unwrap());
            let u2 = t.sigma2.forward(&u).matmul(&mix).unwrap().map(|y| y.atanh());
            let v2 = mix_inv.matmul(&t.sigma1.forward(&v)).unwrap().map(|y| y.atanh());
            *a = SharedAtom::from_products(a.c - 0.3, u2, v2);
        }
        let (moved, t) = (MixingMeasure::Shared(moved), MixingMeasure::Shared(t));
        let (fa, fb) = (t.eval(&fz, &x).unwrap(), moved.eval(&fz, &x).unwrap());
        for (a, b) in fa.iter().zip(&fb) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(loss_d2(&moved, &t).unwrap() > 1e-3);
        assert!(loss_d2(&canonicalize(&moved, &t).unwrap(), &t).unwrap() < 1e-6);
    }
}
