//! A single attention head with adapted query and value projections,
//! evaluated as softmax attention and as a token-level mixture of experts.

use crate::error::{Error, Result};
use crate::numeric::{dot, softmax, softmax_rows, Matrix};

/// `m · (W + B·A) / ‖W + B·A‖_F`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProjection {
    pub b: Matrix,
    pub a: Matrix,
    pub m: f64,
}

impl AdaptedProjection {
    pub fn zero(rows: usize, cols: usize, rank: usize, m: f64) -> Self {
        Self {
            b: Matrix::zeros(rows, rank),
            a: Matrix::zeros(rank, cols),
            m,
        }
    }

    pub fn apply(&self, w: &Matrix) -> Result<Matrix> {
        let adapted = w.add(&self.b.matmul(&self.a)?)?;
        let n = adapted.frobenius_norm();
        if n == 0.0 {
            return Err(Error::Singularity {
                op: "AdaptedProjection::apply",
                detail: "adapted matrix has zero Frobenius norm".into(),
            });
        }
        Ok(adapted.scale(self.m / n))
    }
}

/// Frozen `W_Q, W_K, W_V` (each `d × d_h`) with adapted query and value.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub q: AdaptedProjection,
    pub v: AdaptedProjection,
}

impl HeadParams {
    pub fn d(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_h(&self) -> usize {
        self.w_q.cols()
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.d_h() as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.w_q.shape();
        if shape.1 == 0 || shape.0 == 0 {
            return Err(Error::Config("head needs d >= 1 and d_h >= 1".into()));
        }
        for (name, w) in [("W_K", &self.w_k), ("W_V", &self.w_v)] {
            if w.shape() != shape {
                return Err(Error::dim(
                    "HeadParams",
                    format!("{name} {shape:?}"),
                    format!("{:?}", w.shape()),
                ));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        self.validate()?;
        if x.cols() != self.d() || x.rows() == 0 {
            return Err(Error::dim(
                "head_post",
                format!("N x {} with N >= 1", self.d()),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }
}

/// `softmax(X Q̃ W_Kᵀ Xᵀ / √d_h) · X Ṽ`.
pub fn head_post_direct(x: &Matrix, hp: &HeadParams) -> Result<Matrix> {
    hp.check_input(x)?;
    let q = hp.q.apply(&hp.w_q)?;
    let v = hp.v.apply(&hp.w_v)?;
    let xq = x.matmul(&q)?;
    let xk = x.matmul(&hp.w_k)?;
    let scores = xq.matmul_t(&xk)?.scale(hp.scale());
    softmax_rows(&scores).matmul(&x.matmul(&v)?)
}

/// `E_j`: the `d × Nd` matrix with `E_j · vec(X) = x_j`.
pub fn extraction_matrix(j: usize, n: usize, d: usize) -> Matrix {
    let mut e = Matrix::zeros(d, n * d);
    for t in 0..d {
        e.set(t, j * d + t, 1.0);
    }
    e
}

/// Gate matrix of the mixture form: row `i` is the softmax over `k` of the
/// token-`i` query logit against token `k`.
pub fn head_gates(x: &Matrix, hp: &HeadParams) -> Result<Matrix> {
    hp.check_input(x)?;
    let (n, d) = x.shape();
    let q = hp.q.apply(&hp.w_q)?;
    let qk = q.matmul_t(&hp.w_k)?.scale(hp.scale());
    let x_vec = x.as_slice().to_vec();
    let tokens: Vec<Vec<f64>> = (0..n)
        .map(|j| extraction_matrix(j, n, d).matvec(&x_vec))
        .collect::<Result<_>>()?;
    let mut gates = Matrix::zeros(n, n);
    for i in 0..n {
        let qi = qk.t_matmul(&Matrix::column_vector(&tokens[i]))?.into_vec();
        let logits: Vec<f64> = tokens.iter().map(|xk| dot(&qi, xk)).collect();
        for (k, g) in softmax(&logits).into_iter().enumerate() {
            gates.set(i, k, g);
        }
    }
    Ok(gates)
}

/// Row `i` is `Σ_j gate_{ij} · Ṽᵀ E_j vec(X)`.
pub fn head_post_moe(x: &Matrix, hp: &HeadParams) -> Result<Matrix> {
    let gates = head_gates(x, hp)?;
    let (n, d) = x.shape();
    let v = hp.v.apply(&hp.w_v)?;
    let vt = v.transpose();
    let x_vec = x.as_slice().to_vec();
    let experts: Vec<Vec<f64>> = (0..n)
        .map(|j| vt.matvec(&extraction_matrix(j, n, d).matvec(&x_vec)?))
        .collect::<Result<_>>()?;
    let mut out = Matrix::zeros(n, hp.d_h());
    for i in 0..n {
        for (j, e) in experts.iter().enumerate() {
            let g = gates.get(i, j);
            for (c, ec) in e.iter().enumerate() {
                out.set(i, c, out.get(i, c) + g * ec);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::SeededRng;

    fn random_head(rng: &mut SeededRng, d: usize, d_h: usize, r: usize) -> HeadParams {
        HeadParams {
            w_q: rng.gaussian_matrix(d, d_h, 1.0),
            w_k: rng.gaussian_matrix(d, d_h, 1.0),
            w_v: rng.gaussian_matrix(d, d_h, 1.0),
            q: AdaptedProjection {
                b: rng.gaussian_matrix(d, r, 0.5),
                a: rng.gaussian_matrix(r, d_h, 0.5),
                m: rng.uniform_range(0.5, 2.0),
            },
            v: AdaptedProjection {
                b: rng.gaussian_matrix(d, r, 0.5),
                a: rng.gaussian_matrix(r, d_h, 0.5),
                m: rng.uniform_range(0.5, 2.0),
            },
        }
    }

    #[test]
    fn single_token_returns_value_projection() {
        let mut rng = SeededRng::new(1);
        let hp = random_head(&mut rng, 4, 3, 2);
        let x = rng.gaussian_matrix(1, 4, 1.0);
        let out = head_post_direct(&x, &hp).unwrap();
        let expect = x.matmul(&hp.v.apply(&hp.w_v).unwrap()).unwrap();
        assert!(out.max_abs_diff(&expect).unwrap() < 1e-15);
    }

    #[test]
    fn zero_adaptation_is_pretrained_head() {
        let mut rng = SeededRng::new(2);
        let (d, d_h) = (5, 3);
        let mut hp = random_head(&mut rng, d, d_h, 2);
        hp.q = AdaptedProjection::zero(d, d_h, 2, hp.w_q.frobenius_norm());
        hp.v = AdaptedProjection::zero(d, d_h, 2, hp.w_v.frobenius_norm());
        let x = rng.gaussian_matrix(4, d, 1.0);
        let scores = x
            .matmul(&hp.w_q)
            .unwrap()
            .matmul_t(&x.matmul(&hp.w_k).unwrap())
            .unwrap()
            .scale(1.0 / (d_h as f64).sqrt());
        let pre = softmax_rows(&scores).matmul(&x.matmul(&hp.w_v).unwrap()).unwrap();
        assert!(head_post_direct(&x, &hp).unwrap().max_abs_diff(&pre).unwrap() < 1e-12);
    }

    #[test]
    fn mixture_form_matches_direct_form() {
        let mut rng = SeededRng::new(3);
        for _ in 0..50 {
            let n = 1 + rng.below(8);
            let d = 1 + rng.below(8);
            let d_h = 1 + rng.below(4);
            let r = 1 + rng.below(d.min(d_h));
            let hp = random_head(&mut rng, d, d_h, r);
            let x = rng.gaussian_matrix(n, d, 1.0);
            let a = head_post_direct(&x, &hp).unwrap();
            let b = head_post_moe(&x, &hp).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
    }

    #[test]
    fn two_token_hand_computation() {
        // d = d_h = 1, W_Q = W_K = W_V = 1, no adaptation, m = 1.
        let one = Matrix::from_rows(&[&[1.0]]);
        let hp = HeadParams {
            w_q: one.clone(),
            w_k: one.clone(),
            w_v: one.clone(),
            q: AdaptedProjection::zero(1, 1, 1, 1.0),
            v: AdaptedProjection::zero(1, 1, 1, 1.0),
        };
        let x = Matrix::from_rows(&[&[1.0], &[2.0]]);
        // row 0 logits [1, 2], row 1 logits [2, 4]
        let g0 = 1.0 / (1.0 + 1f64.exp());
        let g1 = 1.0 / (1.0 + 2f64.exp());
        let expect = [g0 * 1.0 + (1.0 - g0) * 2.0, g1 * 1.0 + (1.0 - g1) * 2.0];
        let moe = head_post_moe(&x, &hp).unwrap();
        let direct = head_post_direct(&x, &hp).unwrap();
        for i in 0..2 {
            assert!((moe.get(i, 0) - expect[i]).abs() < 1e-13);
            assert!((direct.get(i, 0) - expect[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn gates_sum_to_one_and_uniform_without_query() {
        let mut rng = SeededRng::new(4);
        let mut hp = random_head(&mut rng, 4, 2, 1);
        let x = rng.gaussian_matrix(5, 4, 1.0);
        let gates = head_gates(&x, &hp).unwrap();
        for i in 0..5 {
            let s: f64 = gates.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        hp.q.m = 0.0;
        let out = head_post_moe(&x, &hp).unwrap();
        let xv = x.matmul(&hp.v.apply(&hp.w_v).unwrap()).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..5).map(|j| xv.get(j, c)).sum::<f64>() / 5.0;
            for i in 0..5 {
                assert!((out.get(i, c) - mean).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut rng = SeededRng::new(5);
        let hp = random_head(&mut rng, 4, 2, 1);
        let x = rng.gaussian_matrix(3, 5, 1.0);
        assert!(matches!(head_post_direct(&x, &hp), Err(Error::Dimension { .. })));
        assert!(matches!(head_post_moe(&x, &hp), Err(Error::Dimension { .. })));
    }
}
