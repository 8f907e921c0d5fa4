use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Solves `A x = b` for symmetric positive definite `A` by Cholesky.
pub fn solve_spd(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::dim(
            "solve_spd",
            format!("square system of order {n}"),
            format!("{:?} with rhs {}", a.shape(), b.len()),
        ));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a.get(j, j);
        for k in 0..j {
            diag -= l.get(j, k) * l.get(j, k);
        }
        if !(diag > 0.0) {
            return Err(Error::Singularity {
                op: "solve_spd",
                detail: format!("pivot {j} is {diag:e}"),
            });
        }
        let ljj = diag.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l.get(i, k) * y[k];
        }
        y[i] = s / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    Ok(x)
}

/// Inverse by Gauss–Jordan elimination with partial pivoting.
pub fn invert(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dim("invert", "square matrix", format!("{:?}", a.shape())));
    }
    let scale = a.max_abs();
    let mut m = a.clone();
    let mut inv = Matrix::identity(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m.get(i, col).abs().total_cmp(&m.get(j, col).abs()))
            .unwrap_or(col);
        let p = m.get(pivot, col);
        if !(p.abs() > 1e-14 * scale) {
            return Err(Error::Singularity {
                op: "invert",
                detail: format!("pivot {col} is {p:e}"),
            });
        }
        for j in 0..n {
            let (x, y) = (m.get(col, j), m.get(pivot, j));
            m.set(pivot, j, x);
            m.set(col, j, y / p);
            let (x, y) = (inv.get(col, j), inv.get(pivot, j));
            inv.set(pivot, j, x);
            inv.set(col, j, y / p);
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = m.get(i, col);
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                m.set(i, j, m.get(i, j) - f * m.get(col, j));
                inv.set(i, j, inv.get(i, j) - f * inv.get(col, j));
            }
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::SeededRng;

    #[test]
    fn solves_random_spd() {
        let mut rng = SeededRng::new(1);
        let g = rng.gaussian_matrix(6, 6, 1.0);
        let a = g.t_matmul(&g).unwrap().add(&Matrix::identity(6)).unwrap();
        let x: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let b = a.matvec(&x).unwrap();
        let got = solve_spd(&a, &b).unwrap();
        for (u, v) in got.iter().zip(&x) {
            assert!((u - v).abs() < 1e-12);
        }
        let neg = Matrix::identity(2).scale(-1.0);
        assert!(solve_spd(&neg, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn inverse_roundtrip() {
        let mut rng = SeededRng::new(2);
        for n in 1..6 {
            let a = rng.gaussian_matrix(n, n, 1.0);
            let inv = invert(&a).unwrap();
            let id = a.matmul(&inv).unwrap();
            assert!(id.max_abs_diff(&Matrix::identity(n)).unwrap() < 1e-10);
        }
        let singular = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(invert(&singular).is_err());
    }
}
