//! Mixing measures that approach the truth in Voronoi loss while their
//! regression function approaches it faster.
//!
//! True atom 1 is split into a pair with query factors
//! `(1 + 1/n)B*₁ ± S/√n` and `A*₁ ± T/√n`, where `S·T = C_Q`. The pair's
//! product sum is `2(1 + 1/n)B*₁A*₁ + (2/n)C_Q`, which moves the summed query
//! matrix along `C_Q + B*₁A*₁`, a direction the normalization ignores.

use crate::error::{Error, Result};
use crate::moe::{NonSharedAtom, NonSharedMeasure};
use crate::numeric::{rank_r_factor, svd, Matrix, RANK_TOLERANCE};

#[derive(Debug, Clone)]
pub struct AdversarialSequence {
    pub measure: NonSharedMeasure,
    /// `D_{1,r}(G_n, G*)` of the construction, assuming every split atom
    /// falls in the first Voronoi cell.
    pub expected_d1r: f64,
    /// Number of rank-`r` pieces `C_Q` was split into.
    pub parts: usize,
}

/// Rank-`rank` pieces `(S_p, T_p)` with `Σ_p S_p T_p = C_Q`.
fn split_pieces(c_q: &Matrix, rank: usize, allow_split: bool) -> Result<Vec<(Matrix, Matrix)>> {
    let whole = rank_r_factor(c_q, rank)?;
    if whole.is_exact() {
        return Ok(vec![(whole.s, whole.t)]);
    }
    if !allow_split {
        return Err(Error::Precondition(format!(
            "rank(C_Q) = {} exceeds r = {rank} and splitting is disabled",
            whole.numerical_rank
        )));
    }
    let dec = svd(c_q)?;
    let parts = whole.numerical_rank.div_ceil(rank);
    let (rows, cols) = c_q.shape();
    let sigma_max = dec.singular_values[0];
    Ok((0..parts)
        .map(|p| {
            let mut s = Matrix::zeros(rows, rank);
            let mut t = Matrix::zeros(rank, cols);
            for slot in 0..rank {
                let k = p * rank + slot;
                let sv = dec.singular_values.get(k).copied().unwrap_or(0.0);
                if sv <= RANK_TOLERANCE * sigma_max {
                    continue;
                }
                let root = sv.sqrt();
                for i in 0..rows {
                    s.set(i, slot, dec.u.get(i, k) * root);
                }
                for j in 0..cols {
                    t.set(slot, j, dec.v.get(j, k) * root);
                }
            }
            (s, t)
        })
        .collect())
}

/// `G_n` for exponent `r` of the loss. The factor rank is taken from the true
/// atoms; with `rank(C_Q)` above it, `C_Q` is split over several pairs when
/// `allow_split` is set.
pub fn adversarial_sequence(
    truth: &NonSharedMeasure,
    n: usize,
    r: u32,
    c_q: &Matrix,
    allow_split: bool,
) -> Result<AdversarialSequence> {
    let first = truth
        .atoms
        .first()
        .ok_or_else(|| Error::Precondition("adversarial_sequence: empty true measure".into()))?;
    if n == 0 || r == 0 {
        return Err(Error::Config("adversarial_sequence needs n >= 1 and r >= 1".into()));
    }
    let rank = first.b_q.cols();
    if c_q.shape() != (first.b_q.rows(), first.a_q.cols()) {
        return Err(Error::dim(
            "adversarial_sequence",
            format!("C_Q {}x{}", first.b_q.rows(), first.a_q.cols()),
            format!("{:?}", c_q.shape()),
        ));
    }
    let pieces = split_pieces(c_q, rank, allow_split)?;
    let parts = pieces.len();
    let nf = n as f64;
    let root_n = nf.sqrt();
    let tail = nf.powi(-(r as i32 + 1));
    let weight = (first.c.exp() + tail) / (2 * parts) as f64;
    let b_scaled = first.b_q.scale(1.0 + 1.0 / (parts as f64 * nf));
    let b_shift = first.b_q.scale(1.0 / (parts as f64 * nf));

    let mut atoms = Vec::with_capacity(truth.atoms.len() + 2 * parts - 1);
    let mut expected = tail;
    for (s, t) in &pieces {
        let (s_n, t_n) = (s.scale(1.0 / root_n), t.scale(1.0 / root_n));
        for sign in [1.0, -1.0] {
            let mut b_q = b_scaled.clone();
            b_q.axpy(sign, &s_n)?;
            let mut a_q = first.a_q.clone();
            a_q.axpy(sign, &t_n)?;
            atoms.push(NonSharedAtom {
                c: weight.ln(),
                b_q,
                a_q,
                ..first.clone()
            });
            let mut db = b_shift.clone();
            db.axpy(sign, &s_n)?;
            expected += weight
                * (db.frobenius_norm().powi(r as i32) + t_n.frobenius_norm().powi(r as i32));
        }
    }
    atoms.extend(truth.atoms[1..].iter().cloned());
    Ok(AdversarialSequence {
        measure: NonSharedMeasure { atoms },
        expected_d1r: expected,
        parts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{loss_d1r, voronoi_assign};
    use crate::moe::{random_nonshared, MeasureDims, MixingMeasure};
    use crate::numeric::SeededRng;

    fn setup(seed: u64, rank_cq: usize) -> (NonSharedMeasure, Matrix) {
        let mut rng = SeededRng::new(seed);
        let dims = MeasureDims {
            d: 4,
            r: 2,
            inner_b: 2,
            inner_a: 2,
        };
        let truth = random_nonshared(2, dims, 1.0, &mut rng);
        let c = rng
            .gaussian_matrix(4, rank_cq, 1.0)
            .matmul(&rng.gaussian_matrix(rank_cq, 4, 1.0))
            .unwrap();
        let c = c.scale(1.0 / c.frobenius_norm());
        (truth, c)
    }

    #[test]
    fn pair_products_sum_as_constructed() {
        let (truth, c_q) = setup(1, 2);
        for n in [1, 2, 8, 100] {
            let seq = adversarial_sequence(&truth, n, 2, &c_q, false).unwrap();
            let g = &seq.measure.atoms;
            assert_eq!(g.len(), 3);
            let sum = g[0]
                .b_q
                .matmul(&g[0].a_q)
                .unwrap()
                .add(&g[1].b_q.matmul(&g[1].a_q).unwrap())
                .unwrap();
            let nf = n as f64;
            let b_a = truth.atoms[0].b_q.matmul(&truth.atoms[0].a_q).unwrap();
            let expect = b_a.scale(2.0 * (1.0 + 1.0 / nf)).add(&c_q.scale(2.0 / nf)).unwrap();
            assert!(sum.max_abs_diff(&expect).unwrap() < 1e-10);
            assert_eq!(g[2], truth.atoms[1]);
        }
    }

    #[test]
    fn loss_matches_rederived_closed_form() {
        let (truth, c_q) = setup(2, 2);
        let t = MixingMeasure::NonShared(truth.clone());
        for r in [1, 2, 3] {
            for n in [64, 256, 1024, 4096] {
                let seq = adversarial_sequence(&truth, n, r, &c_q, false).unwrap();
                let g = MixingMeasure::NonShared(seq.measure.clone());
                assert_eq!(voronoi_assign(&g, &t).unwrap().owner, vec![0, 0, 1]);
                let got = loss_d1r(&g, &t, r).unwrap();
                assert!((got - seq.expected_d1r).abs() < 1e-12 * seq.expected_d1r.max(1e-300));
            }
        }
    }

    #[test]
    fn loss_halves_by_root_two_to_the_r() {
        // The ±S/√n and ±T/√n offsets dominate: D ≈ const · n^{−r/2}.
        let (truth, c_q) = setup(3, 2);
        let t = MixingMeasure::NonShared(truth.clone());
        for r in [1u32, 2, 3] {
            let d = |n| {
                let seq = adversarial_sequence(&truth, n, r, &c_q, false).unwrap();
                loss_d1r(&MixingMeasure::NonShared(seq.measure), &t, r).unwrap()
            };
            let ratio = d(1 << 16) / d(1 << 17);
            let target = 2f64.powf(r as f64 / 2.0);
            assert!((ratio / target - 1.0).abs() < 0.01, "r={r}: {ratio} vs {target}");
        }
    }

    #[test]
    fn converges_to_truth() {
        let (truth, c_q) = setup(4, 1);
        let far = adversarial_sequence(&truth, 10, 2, &c_q, false).unwrap();
        let near = adversarial_sequence(&truth, 1_000_000, 2, &c_q, false).unwrap();
        let gap = |s: &AdversarialSequence| {
            s.measure.atoms[0]
                .b_q
                .sub(&truth.atoms[0].b_q)
                .unwrap()
                .frobenius_norm()
        };
        assert!(gap(&near) < 2e-3 && gap(&near) < gap(&far));
        assert!((2.0 * near.measure.atoms[0].c.exp() - truth.atoms[0].c.exp()).abs() < 1e-12);
    }

    #[test]
    fn high_rank_requires_split() {
        let (truth, c_q) = setup(5, 4);
        assert!(matches!(
            adversarial_sequence(&truth, 8, 2, &c_q, false),
            Err(Error::Precondition(_))
        ));
        let seq = adversarial_sequence(&truth, 8, 2, &c_q, true).unwrap();
        assert_eq!(seq.parts, 2);
        assert_eq!(seq.measure.atoms.len(), 5);
        let mut sum = Matrix::zeros(4, 4);
        for a in &seq.measure.atoms[..4] {
            sum.add_assign(&a.b_q.matmul(&a.a_q).unwrap()).unwrap();
        }
        let b_a = truth.atoms[0].b_q.matmul(&truth.atoms[0].a_q).unwrap();
        let expect = b_a.scale(4.0 + 2.0 / 8.0).add(&c_q.scale(2.0 / 8.0)).unwrap();
        assert!(sum.max_abs_diff(&expect).unwrap() < 1e-10);
    }
}
