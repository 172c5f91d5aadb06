//! Small dense factorizations for covariance handling.

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    lower: Matrix,
}

impl Cholesky {
    pub fn factor(a: &Matrix) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::Shape {
                op: "cholesky",
                lhs: a.shape(),
                rhs: (n, n),
            });
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l.get(j, k) * l.get(j, k);
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::numeric(format!(
                    "matrix is not positive definite (pivot {j} = {d:e})"
                )));
            }
            let d = d.sqrt();
            l.set(j, j, d);
            for i in j + 1..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / d);
            }
        }
        Ok(Cholesky { lower: l })
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn log_det(&self) -> f64 {
        let n = self.lower.rows();
        2.0 * (0..n).map(|i| self.lower.get(i, i).ln()).sum::<f64>()
    }

    /// Solves `A x = b` for every column of `b`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.lower.rows();
        if b.rows() != n {
            return Err(Error::Shape {
                op: "cholesky_solve",
                lhs: (n, n),
                rhs: b.shape(),
            });
        }
        let l = &self.lower;
        let mut x = b.clone();
        for c in 0..b.cols() {
            for i in 0..n {
                let mut s = x.get(i, c);
                for k in 0..i {
                    s -= l.get(i, k) * x.get(k, c);
                }
                x.set(i, c, s / l.get(i, i));
            }
            for i in (0..n).rev() {
                let mut s = x.get(i, c);
                for k in i + 1..n {
                    s -= l.get(k, i) * x.get(k, c);
                }
                x.set(i, c, s / l.get(i, i));
            }
        }
        Ok(x)
    }

    /// `A⁻¹`, symmetrized to remove round-off asymmetry.
    pub fn inverse(&self) -> Matrix {
        let n = self.lower.rows();
        let inv = self
            .solve(&Matrix::identity(n))
            .expect("identity has matching rows");
        Matrix::from_fn(n, n, |i, j| 0.5 * (inv.get(i, j) + inv.get(j, i)))
    }
}

/// Largest absolute eigenvalue of a symmetric matrix by power iteration.
pub fn spectral_radius(a: &Matrix, iters: usize) -> f64 {
    let n = a.rows();
    if n == 0 {
        return 0.0;
    }
    // Iterating on A² avoids the sign oscillation when ±λ tie.
    let a2 = a.matmul(a).expect("square");
    let mut v = Matrix::from_fn(n, 1, |i, _| 1.0 + (i as f64) * 0.013);
    let mut norm = v.frobenius();
    v = v.scale(1.0 / norm);
    let mut lambda2 = 0.0;
    for _ in 0..iters {
        let w = a2.matmul(&v).expect("square");
        norm = w.frobenius();
        if norm == 0.0 {
            return 0.0;
        }
        lambda2 = norm;
        v = w.scale(1.0 / norm);
    }
    lambda2.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_and_solve() {
        let a = Matrix::from_rows(&[[4.0, 2.0, 0.4], [2.0, 5.0, 1.0], [0.4, 1.0, 3.0]]);
        let ch = Cholesky::factor(&a).unwrap();
        let l = ch.lower();
        let back = l.matmul(&l.transpose()).unwrap();
        assert!(back.max_abs_diff(&a) < 1e-12);
        let inv = ch.inverse();
        assert!(inv.matmul(&a).unwrap().max_abs_diff(&Matrix::identity(3)) < 1e-12);
    }

    #[test]
    fn log_det_of_diagonal() {
        let a = Matrix::from_rows(&[[2.0, 0.0], [0.0, 8.0]]);
        let ch = Cholesky::factor(&a).unwrap();
        assert!((ch.log_det() - 16f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn indefinite_is_rejected() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]);
        assert!(Cholesky::factor(&a).unwrap_err().is_numeric());
    }

    #[test]
    fn spectral_radius_of_known_matrix() {
        let a = Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]);
        assert!((spectral_radius(&a, 100) - 1.0).abs() < 1e-12);
        let b = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        assert!((spectral_radius(&b, 100) - 1.0).abs() < 1e-12);
    }
}
