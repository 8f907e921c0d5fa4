//! Property tests for the structural invariants of the adapter maps, their
//! gradients, the attention/mixture identity and the Voronoi losses.
//!
//! Instances are drawn from a seeded generator keyed by a proptest-chosen
//! seed, so shrinking reports a reproducible seed.

use doran_core::adapters::{expected_column_norms, normalize_columns};
use doran_core::codec::{decode_matrix, encode_matrix};
use doran_core::estimation::{experiment_instance, loss_d1r, loss_d2, ProblemConfig};
use doran_core::gradients::{form_discrepancy, grad_wprime_chain, grad_wprime_decomposed, pde_inner_product, pde_loss};
use doran_core::moe::{head_gates, head_post_direct, head_post_moe, AdaptedProjection, HeadParams, MeasureKind, MixingMeasure};
use doran_core::numeric::{dot, softmax, Matrix, SeededRng};
use proptest::prelude::*;

fn column_norm(m: &Matrix, j: usize) -> f64 {
    m.column(j).iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn magnitudes(rng: &mut SeededRng, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.uniform_range(-2.0, 2.0)).collect()
}

fn head(rng: &mut SeededRng, d: usize, d_h: usize, r: usize) -> HeadParams {
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

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn column_norms_shrink_by_n_over_n_plus_tau(
        seed in any::<u64>(), d in 1usize..10, k in 1usize..10, tau in 1e-3f64..10.0,
    ) {
        let mut rng = SeededRng::new(seed);
        let wp = rng.gaussian_matrix(d, k, 1.0);
        let m = magnitudes(&mut rng, k);
        let w = normalize_columns(&wp, &m, tau).unwrap();
        let expected = expected_column_norms(&wp, &m, tau).unwrap();
        for j in 0..k {
            let got = column_norm(&w, j);
            prop_assert!((got - expected[j]).abs() <= 1e-13 * (1.0 + expected[j]));
            prop_assert!(got < m[j].abs() || m[j] == 0.0);
        }
    }

    #[test]
    fn columns_keep_their_direction(seed in any::<u64>(), d in 1usize..10, k in 1usize..8, tau in 0.0f64..5.0) {
        let mut rng = SeededRng::new(seed);
        let wp = rng.gaussian_matrix(d, k, 1.0);
        let m: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.1, 2.0)).collect();
        let w = normalize_columns(&wp, &m, tau).unwrap();
        for j in 0..k {
            let cos = dot(&w.column(j), &wp.column(j)) / (column_norm(&w, j) * column_norm(&wp, j));
            prop_assert!((cos - 1.0).abs() < 1e-12, "column {j}: cos {cos}");
        }
    }

    #[test]
    fn column_norms_decrease_in_tau(
        seed in any::<u64>(), d in 1usize..8, k in 1usize..8, t1 in 1e-3f64..10.0, gap in 1e-3f64..10.0,
    ) {
        let mut rng = SeededRng::new(seed);
        let wp = rng.gaussian_matrix(d, k, 1.0);
        let m = magnitudes(&mut rng, k);
        let lo = expected_column_norms(&wp, &m, t1).unwrap();
        let hi = expected_column_norms(&wp, &m, t1 + gap).unwrap();
        for j in 0..k {
            prop_assert!(hi[j] <= lo[j]);
        }
    }

    #[test]
    fn joint_rescaling_of_wprime_and_tau_is_a_no_op(
        seed in any::<u64>(), d in 1usize..8, k in 1usize..8, tau in 1e-3f64..10.0, s in 1e-3f64..1e3,
    ) {
        let mut rng = SeededRng::new(seed);
        let wp = rng.gaussian_matrix(d, k, 1.0);
        let m = magnitudes(&mut rng, k);
        let base = normalize_columns(&wp, &m, tau).unwrap();
        let scaled = normalize_columns(&wp.scale(s), &m, tau * s).unwrap();
        prop_assert!(base.max_abs_diff(&scaled).unwrap() <= 1e-13 * (1.0 + base.max_abs()));
    }

    #[test]
    fn zero_columns_map_to_zero_when_tau_is_positive(
        seed in any::<u64>(), d in 1usize..8, k in 2usize..8, tau in 1e-6f64..10.0,
    ) {
        let mut rng = SeededRng::new(seed);
        let mut wp = rng.gaussian_matrix(d, k, 1.0);
        let dead = rng.below(k);
        wp.set_column(dead, &vec![0.0; d]);
        let w = normalize_columns(&wp, &magnitudes(&mut rng, k), tau).unwrap();
        prop_assert!(w.column(dead).iter().all(|v| *v == 0.0));
        prop_assert!(normalize_columns(&wp, &vec![1.0; k], 0.0).is_err());
    }

    #[test]
    fn gradient_forms_agree(
        seed in any::<u64>(), d in 1usize..10, k in 1usize..10, tau in 1e-3f64..10.0,
    ) {
        let mut rng = SeededRng::new(seed);
        let wp = rng.gaussian_matrix(d, k, 1.0);
        let g = rng.gaussian_matrix(d, k, 1.0);
        let m = magnitudes(&mut rng, k);
        let dec = grad_wprime_decomposed(&g, &wp, &m, tau).unwrap();
        let chain = grad_wprime_chain(&g, &wp, &m, tau).unwrap();
        prop_assert!(form_discrepancy(&dec, &chain, &g, &wp, &m, tau).unwrap() < 1e-10);
    }

    /// Radial part of the W′ gradient: `⟨∇_j, W′_j⟩ = m_j τ ⟨G_j, W′_j⟩ / (n_j + τ)²`,
    /// which vanishes as τ → 0 (the scale invariance of DoRA).
    #[test]
    fn radial_gradient_component_is_proportional_to_tau(
        seed in any::<u64>(), d in 1usize..10, k in 1usize..8, tau in 1e-3f64..10.0,
    ) {
        let mut rng = SeededRng::new(seed);
        let wp = rng.gaussian_matrix(d, k, 1.0);
        let g = rng.gaussian_matrix(d, k, 1.0);
        let m = magnitudes(&mut rng, k);
        let grad = grad_wprime_decomposed(&g, &wp, &m, tau).unwrap();
        for j in 0..k {
            let n = column_norm(&wp, j);
            let radial = dot(&grad.column(j), &wp.column(j));
            let expected = m[j] * tau * dot(&g.column(j), &wp.column(j)) / (n + tau).powi(2);
            let scale = m[j].abs() * column_norm(&g, j) * n / (n + tau);
            prop_assert!((radial - expected).abs() <= 1e-12 * (1.0 + scale), "column {j}: {radial} vs {expected}");
        }
    }

    #[test]
    fn gate_logit_depends_only_on_direction(
        seed in any::<u64>(), d in 1usize..8, s in 1e-2f64..1e2, m_q in -1.0f64..1.0,
    ) {
        let mut rng = SeededRng::new(seed);
        let c_q = rng.gaussian_matrix(d, d, 0.5);
        let z = rng.gaussian_matrix(d, d, 0.5);
        let c_k = rng.gaussian_matrix(d, d, 0.5);
        let x: Vec<f64> = (0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let base = pde_loss(&c_q, &z, &c_k, m_q, &x).unwrap();
        let scaled = pde_loss(&c_q.scale(s), &z.scale(s), &c_k, m_q, &x).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-13 * base.abs().max(1.0));
        let probe = pde_inner_product(&c_q, &z, &c_k, m_q, &x).unwrap();
        prop_assert!(probe.inner.abs() <= 1e-10 * probe.loss.abs().max(1.0));
    }

    #[test]
    fn attention_equals_token_mixture(
        seed in any::<u64>(), n in 1usize..7, d in 1usize..7, d_h in 1usize..5,
    ) {
        let mut rng = SeededRng::new(seed);
        let r = 1 + rng.below(d.min(d_h));
        let hp = head(&mut rng, d, d_h, r);
        let x = rng.gaussian_matrix(n, d, 1.0);
        let direct = head_post_direct(&x, &hp).unwrap();
        let moe = head_post_moe(&x, &hp).unwrap();
        prop_assert!(direct.max_abs_diff(&moe).unwrap() < 1e-12);
        let gates = head_gates(&x, &hp).unwrap();
        for i in 0..n {
            let total: f64 = gates.row(i).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-14);
            prop_assert!(gates.row(i).iter().all(|g| *g >= 0.0));
        }
    }

    #[test]
    fn softmax_is_shift_invariant(logits in prop::collection::vec(-50.0f64..50.0, 1..12), shift in -1e3f64..1e3) {
        let base = softmax(&logits);
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        for (a, b) in base.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!((base.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn matrix_codec_round_trips_bit_exactly(seed in any::<u64>(), r in 0usize..6, c in 0usize..6) {
        let mut rng = SeededRng::new(seed);
        let mut m = rng.gaussian_matrix(r, c, 1e3);
        if r * c > 0 {
            m.set(0, 0, -0.0);
            m.set(r - 1, c - 1, f64::MIN_POSITIVE / 3.0);
        }
        let back = decode_matrix(&encode_matrix(&m)).unwrap();
        prop_assert_eq!(back.shape(), m.shape());
        prop_assert!(back.as_slice().iter().zip(m.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn derived_streams_are_reproducible(seed in any::<u64>(), label in any::<u64>()) {
        let root = SeededRng::new(seed);
        let (mut a, mut b) = (root.derive(label), root.derive(label));
        let mut other = root.derive(label.wrapping_add(1));
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let zs: Vec<u64> = (0..8).map(|_| other.next_u64()).collect();
        prop_assert_eq!(&xs, &ys);
        prop_assert_ne!(&xs, &zs);
    }
}

fn voronoi(kind: MeasureKind, fit: &MixingMeasure, truth: &MixingMeasure) -> f64 {
    match kind {
        MeasureKind::Shared => loss_d2(fit, truth).unwrap(),
        MeasureKind::NonShared => loss_d1r(fit, truth, 2).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn voronoi_losses_ignore_atom_order(seed in any::<u64>(), shared in any::<bool>(), atoms in 2usize..5) {
        let kind = if shared { MeasureKind::Shared } else { MeasureKind::NonShared };
        let problem = ProblemConfig::default();
        let (_, truth) = experiment_instance(kind, &problem, seed).unwrap();
        let (_, fit) = experiment_instance(kind, &ProblemConfig { true_atoms: atoms, ..problem }, seed ^ 1).unwrap();
        let base = voronoi(kind, &fit, &truth);
        prop_assert!(base >= 0.0);
        let mut rng = SeededRng::new(seed);
        for _ in 0..4 {
            let mut p: Vec<usize> = (0..fit.len()).collect();
            rng.shuffle(&mut p);
            let mut q: Vec<usize> = (0..truth.len()).collect();
            rng.shuffle(&mut q);
            let v = voronoi(kind, &fit.permuted(&p).unwrap(), &truth.permuted(&q).unwrap());
            prop_assert_eq!(v.to_bits(), base.to_bits());
        }
        prop_assert!(voronoi(kind, &truth, &truth) <= 1e-12);
    }
}
