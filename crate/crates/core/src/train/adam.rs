use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Adam moments for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamState {
    pub fn new(params: &[&Matrix]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One bias-corrected update. `grads[i] == None` leaves parameter `i`
    /// and its moments untouched.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Option<Matrix>], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn adam_step(params: &mut [&mut Matrix], grads: &[Option<Matrix>], state: &mut AdamState, lr: f64) -> Result<()> {
    state.step(params, grads, lr)
}

/// Rescales gradients so their joint Frobenius norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Matrix>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(Matrix::sum_squares)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Matrix::from_rows(&[[1.0, -2.0, 0.5]]);
        let g = Matrix::from_rows(&[[3.0, -0.01, 1e4]]);
        let mut st = AdamState::new(&[&p]);
        st.step(&mut [&mut p], &[Some(g.clone())], 0.001).unwrap();
        let before = [1.0, -2.0, 0.5];
        for j in 0..3 {
            let delta = p.get(0, j) - before[j];
            assert!(delta.abs() >= 0.000999 && delta.abs() <= 0.001, "{delta}");
            assert_eq!(delta.signum(), -g.get(0, j).signum());
        }
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = Matrix::from_rows(&[[1.0, -2.0]]);
        let orig = p.clone();
        let mut st = AdamState::new(&[&p]);
        for _ in 0..100 {
            st.step(&mut [&mut p], &[Some(Matrix::zeros(1, 2))], 0.001).unwrap();
        }
        assert_eq!(p, orig);
    }

    #[test]
    fn clipping_caps_joint_norm() {
        let mut g = vec![Some(Matrix::from_rows(&[[3.0]])), None, Some(Matrix::from_rows(&[[4.0]]))];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let n: f64 = g.iter().flatten().map(Matrix::sum_squares).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
