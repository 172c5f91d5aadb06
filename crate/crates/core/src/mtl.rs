//! Knowledge-sharing penalties across modes: the cross-task weight penalty
//! for cross-connected layers and the tensor-normal penalty with
//! Kronecker-factored covariance, plus flip-flop covariance estimation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Cholesky, Matrix, Tape, Tensor3, Var};

pub const DEFAULT_ALPHA: f64 = 0.1;

/// `alpha * Σ_i ‖W_{i→i}‖² + Σ_{i≠j} ‖W_{i→j}‖²` over `n_modes²` weights
/// stored source-major (`weights[k * n_modes + m]` maps mode `k` into `m`).
pub fn j1(weights: &[Matrix], n_modes: usize, alpha: f64) -> Result<f64> {
    check_square_set(weights.len(), n_modes)?;
    Ok(weights
        .iter()
        .enumerate()
        .map(|(idx, w)| {
            let s = w.sum_squares();
            if idx / n_modes == idx % n_modes {
                alpha * s
            } else {
                s
            }
        })
        .sum())
}

/// [`j1`] recorded on a tape.
pub fn j1_on_tape(tape: &mut Tape, weights: &[Var], n_modes: usize, alpha: f64) -> Result<Var> {
    check_square_set(weights.len(), n_modes)?;
    let terms: Vec<(Var, f64)> = weights
        .iter()
        .enumerate()
        .map(|(idx, &w)| {
            let coef = if idx / n_modes == idx % n_modes { alpha } else { 1.0 };
            (tape.sum_squares(w), coef)
        })
        .collect();
    tape.weighted_sum(&terms)
}

fn check_square_set(len: usize, n_modes: usize) -> Result<()> {
    if len != n_modes * n_modes {
        return Err(Error::Usage(format!(
            "cross-task penalty needs {} weight matrices, got {len}",
            n_modes * n_modes
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlipFlopConfig {
    /// Keep the input-feature covariance at its current value (identity
    /// unless set otherwise).
    pub fix_input: bool,
    pub fix_output: bool,
    /// Ridge added to each update, relative to the mean diagonal of the
    /// raw statistic.
    pub ridge_factor: f64,
    pub tolerance: f64,
    pub max_sweeps: usize,
    pub max_retries: usize,
}

impl Default for FlipFlopConfig {
    fn default() -> Self {
        FlipFlopConfig {
            fix_input: true,
            fix_output: true,
            ridge_factor: 1e-3,
            tolerance: 1e-6,
            max_sweeps: 50,
            max_retries: 3,
        }
    }
}

impl FlipFlopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge_factor > 0.0) || !(self.tolerance > 0.0) || self.max_sweeps == 0 {
            return Err(Error::validation(
                "flip-flop needs ridge_factor > 0, tolerance > 0 and max_sweeps >= 1",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipFlopReport {
    pub sweeps: usize,
    pub converged: bool,
    pub retries: usize,
    /// Penalty value after each sweep.
    pub j2_history: Vec<f64>,
    /// Ridge-regularized negative log-prior after each sweep; the quantity
    /// the block updates minimize.
    pub objective_history: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Factor {
    sigma: Matrix,
    /// `None` when `sigma` is exactly the identity.
    inverse: Option<Matrix>,
    log_det: f64,
}

impl Factor {
    fn new(sigma: Matrix, what: &str, layer: usize) -> Result<Self> {
        let n = sigma.rows();
        if sigma == Matrix::identity(n) {
            return Ok(Factor {
                sigma,
                inverse: None,
                log_det: 0.0,
            });
        }
        if !sigma.is_symmetric(1e-10) {
            return Err(Error::numeric(format!("layer {layer}: {what} covariance is not symmetric")));
        }
        let chol = Cholesky::factor(&sigma)
            .map_err(|e| Error::numeric(format!("layer {layer}: {what} covariance: {e}")))?;
        Ok(Factor {
            inverse: Some(chol.inverse()),
            log_det: chol.log_det(),
            sigma,
        })
    }
}

const FACTOR_NAMES: [&str; 3] = ["input", "output", "mode"];

/// Kronecker factors `(Σ_I, Σ_O, Σ_M)` of one layer's weight-tensor
/// covariance, with cached inverses and log-determinants.
#[derive(Clone, Debug)]
pub struct Covariances {
    layer: usize,
    factors: [Factor; 3],
    fixed: [bool; 3],
}

impl Covariances {
    /// Identity factors for a weight tensor of shape `dims`
    /// (input width, output width, modes).
    pub fn identity(layer: usize, dims: [usize; 3], fix_input: bool, fix_output: bool) -> Self {
        let f = |n: usize| Factor {
            sigma: Matrix::identity(n),
            inverse: None,
            log_det: 0.0,
        };
        Covariances {
            layer,
            factors: [f(dims[0]), f(dims[1]), f(dims[2])],
            fixed: [fix_input, fix_output, false],
        }
    }

    pub fn new(layer: usize, sigmas: [Matrix; 3], fix_input: bool, fix_output: bool) -> Result<Self> {
        let [a, b, c] = sigmas;
        Ok(Covariances {
            layer,
            factors: [
                Factor::new(a, FACTOR_NAMES[0], layer)?,
                Factor::new(b, FACTOR_NAMES[1], layer)?,
                Factor::new(c, FACTOR_NAMES[2], layer)?,
            ],
            fixed: [fix_input, fix_output, false],
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn dims(&self) -> [usize; 3] {
        [0, 1, 2].map(|k| self.factors[k].sigma.rows())
    }

    /// Factor `k` in `0..3` (input, output, mode).
    pub fn sigma(&self, k: usize) -> &Matrix {
        &self.factors[k].sigma
    }

    pub fn is_fixed(&self, k: usize) -> bool {
        self.fixed[k]
    }

    fn check(&self, w: &Tensor3) -> Result<()> {
        if w.dims() != self.dims() {
            return Err(Error::Shape {
                op: "tensor_normal_penalty",
                lhs: (w.dims()[0], w.dims()[1] * w.dims()[2]),
                rhs: (self.dims()[0], self.dims()[1] * self.dims()[2]),
            });
        }
        Ok(())
    }

    /// `W` multiplied along every mode except `skip` by the inverse factors.
    fn whiten(&self, w: &Tensor3, skip: Option<usize>) -> Result<Tensor3> {
        let mut out = w.clone();
        for k in 0..3 {
            if Some(k) == skip {
                continue;
            }
            if let Some(inv) = &self.factors[k].inverse {
                out = out.mode_product(k + 1, inv)?;
            }
        }
        Ok(out)
    }

    fn weighted_log_dets(&self) -> f64 {
        let dims = self.dims();
        let d: usize = dims.iter().product();
        (0..3)
            .map(|k| d as f64 / dims[k] as f64 * self.factors[k].log_det)
            .sum()
    }

    /// Penalty value and its gradient with respect to `W` (factors held
    /// constant).
    pub fn j2_with_gradient(&self, w: &Tensor3) -> Result<(f64, Tensor3)> {
        self.check(w)?;
        let v = self.whiten(w, None)?;
        let value = w.inner(&v) - self.weighted_log_dets();
        Ok((value, v.scale(2.0)))
    }

    /// `vec(W)ᵀ(Σ_I⊗Σ_O⊗Σ_M)⁻¹vec(W) − Σ_k (D/d_k) ln|Σ_k|`.
    pub fn j2(&self, w: &Tensor3) -> Result<f64> {
        self.check(w)?;
        Ok(w.inner(&self.whiten(w, None)?) - self.weighted_log_dets())
    }

    /// Tensor-normal negative log-density of `W` up to its constant:
    /// the same quadratic form plus the log-determinant terms.
    pub fn neg_log_prior(&self, w: &Tensor3) -> Result<f64> {
        self.check(w)?;
        Ok(w.inner(&self.whiten(w, None)?) + self.weighted_log_dets())
    }

    /// Re-estimates the free factors from `W` by cyclic block updates,
    /// then rescales `Σ_M` to trace `M` and moves the inverse scale onto
    /// the first free factor.
    ///
    /// Each factor's ridge `ε_k` is fixed on its first update of the call,
    /// so every block step exactly minimizes the negative log-prior plus
    /// `Σ_k (D/d_k) ε_k tr(Σ_k⁻¹)`, the value recorded per sweep.
    pub fn flip_flop(&mut self, w: &Tensor3, cfg: &FlipFlopConfig) -> Result<FlipFlopReport> {
        cfg.validate()?;
        self.check(w)?;
        if w.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("layer {}: non-finite weights before covariance update", self.layer)));
        }
        self.fixed[0] = cfg.fix_input;
        self.fixed[1] = cfg.fix_output;
        let mut report = FlipFlopReport {
            sweeps: 0,
            converged: false,
            retries: 0,
            j2_history: Vec::new(),
            objective_history: Vec::new(),
        };
        let mut ridge = [None; 3];
        let mut scale = 1.0;
        while report.sweeps < cfg.max_sweeps {
            let before = self.factors.clone();
            match self.sweep(w, cfg.ridge_factor * scale, &mut ridge) {
                Ok(()) => {}
                Err(e) if e.is_numeric() && report.retries < cfg.max_retries => {
                    self.factors = before;
                    scale *= 2.0;
                    for r in ridge.iter_mut().flatten() {
                        *r *= 2.0;
                    }
                    report.retries += 1;
                    continue;
                }
                Err(e) => {
                    self.factors = before;
                    return Err(e);
                }
            }
            report.sweeps += 1;
            report.j2_history.push(self.j2(w)?);
            report.objective_history.push(self.regularized_neg_log_prior(w, &ridge)?);
            let change = (0..3)
                .filter(|&k| !self.fixed[k])
                .map(|k| {
                    let old = &before[k].sigma;
                    let diff = self.factors[k].sigma.sub(old).expect("same shape").frobenius();
                    diff / old.frobenius().max(f64::MIN_POSITIVE)
                })
                .fold(0.0, f64::max);
            if change < cfg.tolerance {
                report.converged = true;
                break;
            }
        }
        self.normalize_scale()?;
        Ok(report)
    }

    fn regularized_neg_log_prior(&self, w: &Tensor3, ridge: &[Option<f64>; 3]) -> Result<f64> {
        let dims = self.dims();
        let d: usize = dims.iter().product();
        let mut v = self.neg_log_prior(w)?;
        for k in 0..3 {
            if let (Some(eps), Some(inv)) = (ridge[k], &self.factors[k].inverse) {
                v += d as f64 / dims[k] as f64 * eps * inv.trace();
            }
        }
        Ok(v)
    }

    fn sweep(&mut self, w: &Tensor3, ridge_factor: f64, ridge: &mut [Option<f64>; 3]) -> Result<()> {
        let dims = self.dims();
        let d: usize = dims.iter().product();
        for k in 0..3 {
            if self.fixed[k] {
                continue;
            }
            let v = self.whiten(w, Some(k))?;
            let mut stat = w.unfold(k + 1)?.matmul(&v.unfold(k + 1)?.transpose())?;
            stat = stat.scale(dims[k] as f64 / d as f64);
            let n = dims[k];
            let eps = *ridge[k].get_or_insert_with(|| {
                let mean_diag = stat.trace() / n as f64;
                ridge_factor * if mean_diag > 0.0 { mean_diag } else { 1.0 }
            });
            let sym = Matrix::from_fn(n, n, |i, j| {
                0.5 * (stat.get(i, j) + stat.get(j, i)) + if i == j { eps } else { 0.0 }
            });
            self.factors[k] = Factor::new(sym, FACTOR_NAMES[k], self.layer)?;
        }
        Ok(())
    }

    fn normalize_scale(&mut self) -> Result<()> {
        let m = self.dims()[2] as f64;
        let c = m / self.factors[2].sigma.trace();
        if c != 1.0 && c.is_finite() {
            let scaled = self.factors[2].sigma.scale(c);
            self.factors[2] = Factor::new(scaled, FACTOR_NAMES[2], self.layer)?;
            if let Some(k) = (0..2).find(|&k| !self.fixed[k]) {
                let absorbed = self.factors[k].sigma.scale(1.0 / c);
                self.factors[k] = Factor::new(absorbed, FACTOR_NAMES[k], self.layer)?;
            }
        }
        Ok(())
    }
}

/// Penalty value for one layer's weight tensor.
pub fn j2(w: &Tensor3, cov: &Covariances) -> Result<f64> {
    cov.j2(w)
}

/// Updates the free covariance factors in place.
pub fn flip_flop_update(w: &Tensor3, cov: &mut Covariances, cfg: &FlipFlopConfig) -> Result<FlipFlopReport> {
    cov.flip_flop(w, cfg)
}

/// Records the penalty on a tape as a node whose partial with respect to
/// each mode's weight matrix is the matching frontal slice of the tensor
/// gradient.
pub fn j2_on_tape(tape: &mut Tape, weights: &[Var], cov: &Covariances) -> Result<Var> {
    let slices: Vec<&Matrix> = weights.iter().map(|&v| tape.value(v)).collect();
    let w = Tensor3::stack_frontal(&slices)?;
    let (value, grad) = cov.j2_with_gradient(&w)?;
    let partials = (0..weights.len()).map(|m| grad.frontal_slice(m)).collect();
    tape.precomputed(weights, value, partials)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn j1_hand_arithmetic() {
        let two = Matrix::from_rows(&[[2.0]]);
        let one = Matrix::from_rows(&[[1.0]]);
        let w = vec![two.clone(), one.clone(), one, two];
        assert!((j1(&w, 2, 0.1).unwrap() - 2.8).abs() < 1e-12);
        let zeros = vec![Matrix::zeros(2, 2); 4];
        assert_eq!(j1(&zeros, 2, 0.1).unwrap(), 0.0);
        assert!(j1(&w[..3], 2, 0.1).is_err());
    }

    #[test]
    fn j2_scalar_case() {
        let w = Tensor3::new([1, 1, 1], vec![2.0]).unwrap();
        let cov = Covariances::new(
            0,
            [Matrix::scalar(2.0), Matrix::scalar(1.0), Matrix::scalar(1.0)],
            false,
            false,
        )
        .unwrap();
        assert!((cov.j2(&w).unwrap() - (2.0 - 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn identity_factors_give_squared_norm() {
        let w = Tensor3::from_fn([3, 2, 2], |i, j, k| (i as f64 - j as f64) * 0.3 + k as f64);
        let cov = Covariances::identity(0, [3, 2, 2], true, true);
        let norm: f64 = w.data().iter().map(|v| v * v).sum();
        assert!((cov.j2(&w).unwrap() - norm).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_identity_mode_covariance() {
        let w = Tensor3::zeros([3, 2, 2]);
        let mut cov = Covariances::identity(0, [3, 2, 2], false, false);
        flip_flop_update(&w, &mut cov, &FlipFlopConfig::default()).unwrap();
        assert!(cov.sigma(2).max_abs_diff(&Matrix::identity(2)) < 1e-12);
        // remaining factors are ridge times identity up to the absorbed scale
        for k in 0..2 {
            let s = cov.sigma(k);
            let d = s.get(0, 0);
            assert!(s.max_abs_diff(&Matrix::identity(s.rows()).scale(d)) < 1e-15);
        }
    }

    #[test]
    fn fixed_factors_stay_identity() {
        let w = Tensor3::from_fn([3, 2, 2], |i, j, k| ((i * 7 + j * 3 + k) % 5) as f64 - 2.0);
        let mut cov = Covariances::identity(1, [3, 2, 2], true, true);
        flip_flop_update(&w, &mut cov, &FlipFlopConfig::default()).unwrap();
        assert_eq!(cov.sigma(0), &Matrix::identity(3));
        assert_eq!(cov.sigma(1), &Matrix::identity(2));
        assert!((cov.sigma(2).trace() - 2.0).abs() < 1e-12);
    }
}
