use serde::{Deserialize, Serialize};

use crate::dataset::SampleSet;
use crate::error::{Error, Result};
use crate::eval::rmse;
use crate::numcore::Matrix;

const TOLERANCE: f64 = 1e-7;
const MAX_SWEEPS: usize = 10_000;

pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub sweeps: usize,
    pub converged: bool,
}

impl LassoFit {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }
}

fn column_means(x: &Matrix) -> Vec<f64> {
    let n = x.rows() as f64;
    (0..x.cols()).map(|j| (0..x.rows()).map(|i| x.get(i, j)).sum::<f64>() / n).collect()
}

/// Smallest penalty at which every weight is zero.
pub fn null_lambda(x: &Matrix, y: &[f64]) -> f64 {
    let n = x.rows() as f64;
    let xm = column_means(x);
    let ym = y.iter().sum::<f64>() / n;
    (0..x.cols())
        .map(|j| ((0..x.rows()).map(|i| (x.get(i, j) - xm[j]) * (y[i] - ym)).sum::<f64>() / n).abs())
        .fold(0.0, f64::max)
}

/// Minimizes `(1/2n)‖y − b − Xw‖² + λ‖w‖₁` by cyclic coordinate descent
/// with an unpenalized intercept.
pub fn lasso_fit(x: &Matrix, y: &[f64], lambda: f64) -> Result<LassoFit> {
    let (n, p) = x.shape();
    if y.len() != n || n == 0 {
        return Err(Error::validation(format!("lasso needs matching non-empty data ({n} rows, {} targets)", y.len())));
    }
    if !(lambda >= 0.0) {
        return Err(Error::validation("lasso penalty must be nonnegative"));
    }
    let nf = n as f64;
    let xm = column_means(x);
    let ym = y.iter().sum::<f64>() / nf;
    // centered columns, column-major
    let cols: Vec<Vec<f64>> = (0..p).map(|j| (0..n).map(|i| x.get(i, j) - xm[j]).collect()).collect();
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / nf).collect();
    let mut w = vec![0.0; p];
    let mut resid: Vec<f64> = y.iter().map(|v| v - ym).collect();
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut max_delta: f64 = 0.0;
        for j in 0..p {
            if norms[j] == 0.0 {
                continue;
            }
            let c = &cols[j];
            let rho = c.iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() / nf + norms[j] * w[j];
            let new = soft_threshold(rho, lambda) / norms[j];
            let delta = new - w[j];
            if delta != 0.0 {
                for (r, a) in resid.iter_mut().zip(c) {
                    *r -= delta * a;
                }
                w[j] = new;
            }
            max_delta = max_delta.max(delta.abs());
        }
        if max_delta < TOLERANCE {
            converged = true;
            break;
        }
    }
    let intercept = ym - xm.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    Ok(LassoFit {
        weights: w,
        intercept,
        lambda,
        sweeps,
        converged,
    })
}

/// Ten log-spaced penalties from 1e-3 to 1e2.
pub fn lambda_grid() -> Vec<f64> {
    (0..10).map(|k| 10f64.powf(-3.0 + 5.0 * k as f64 / 9.0)).collect()
}

/// One LASSO per (mode, zone) over that zone's lag features of all modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LassoModel {
    /// `[mode][zone]`
    pub fits: Vec<Vec<LassoFit>>,
}

/// Design matrix of one zone: row `s` concatenates every mode's four lag
/// features of sample `s`.
fn zone_design(set: &SampleSet, zone: usize) -> Matrix {
    let n = set.n_zones();
    let nm = set.n_modes();
    Matrix::from_fn(set.len(), 4 * nm, |s, c| set.features(c / 4).get(s * n + zone, c % 4))
}

fn zone_labels(set: &SampleSet, zone: usize, mode: usize) -> Vec<f64> {
    (0..set.len()).map(|s| set.label(s, zone, mode)).collect()
}

/// Fits every (mode, zone) model over [`lambda_grid`] and keeps the penalty
/// with the lowest validation RMSE for that zone and mode.
pub fn fit_lasso(train: &SampleSet, val: &SampleSet) -> Result<LassoModel> {
    if train.zones() != val.zones() || train.n_modes() != val.n_modes() {
        return Err(Error::validation("training and validation samples use different zones or modes"));
    }
    let grid = lambda_grid();
    let mut fits = vec![Vec::with_capacity(train.n_zones()); train.n_modes()];
    for z in 0..train.n_zones() {
        let xt = zone_design(train, z);
        let xv = zone_design(val, z);
        for (m, per_mode) in fits.iter_mut().enumerate() {
            let yt = zone_labels(train, z, m);
            let yv = zone_labels(val, z, m);
            let mut best: Option<(f64, LassoFit)> = None;
            for &lambda in &grid {
                let fit = lasso_fit(&xt, &yt, lambda)?;
                let pred: Vec<f64> = (0..val.len()).map(|s| fit.predict_row(xv.row(s)).max(0.0)).collect();
                let score = rmse(&pred, &yv)?;
                if best.as_ref().is_none_or(|(b, _)| score < *b) {
                    best = Some((score, fit));
                }
            }
            per_mode.push(best.expect("grid is non-empty").1);
        }
    }
    Ok(LassoModel { fits })
}

impl LassoModel {
    pub fn unconverged(&self) -> usize {
        self.fits.iter().flatten().filter(|f| !f.converged).count()
    }

    /// Unclipped predictions per mode, `(samples * zones) x 1`.
    pub fn predict(&self, set: &SampleSet) -> Result<Vec<Matrix>> {
        if self.fits.len() != set.n_modes() || self.fits.iter().any(|f| f.len() != set.n_zones()) {
            return Err(Error::validation("LASSO model and samples have different shapes"));
        }
        let n = set.n_zones();
        let designs: Vec<Matrix> = (0..n).map(|z| zone_design(set, z)).collect();
        self.fits
            .iter()
            .map(|per_zone| {
                let data = (0..set.len() * n)
                    .map(|r| per_zone[r % n].predict_row(designs[r % n].row(r / n)))
                    .collect();
                Matrix::new(set.len() * n, 1, data)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_definition() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
    }

    #[test]
    fn grid_spans_five_decades() {
        let g = lambda_grid();
        assert_eq!(g.len(), 10);
        assert!((g[0] - 1e-3).abs() < 1e-15 && (g[9] - 1e2).abs() < 1e-10);
    }

    #[test]
    fn unpenalized_fit_matches_normal_equations() {
        // y = 1 + 2 x1 - 3 x2 + small perturbation; oracle from the 3x3
        // normal equations solved by Cramer's rule
        let x = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.5], [2.0, -1.0], [3.0, 0.0], [1.5, 2.0], [-1.0, 0.3]]);
        let y: Vec<f64> = (0..6)
            .map(|i| 1.0 + 2.0 * x.get(i, 0) - 3.0 * x.get(i, 1) + [0.1, -0.2, 0.05, 0.0, 0.3, -0.1][i])
            .collect();
        let a = Matrix::from_fn(6, 3, |i, j| if j == 0 { 1.0 } else { x.get(i, j - 1) });
        let ata = a.transpose().matmul(&a).unwrap();
        let aty = a.transpose().matmul(&Matrix::column(&y)).unwrap();
        let det3 = |m: &Matrix| {
            m.get(0, 0) * (m.get(1, 1) * m.get(2, 2) - m.get(1, 2) * m.get(2, 1))
                - m.get(0, 1) * (m.get(1, 0) * m.get(2, 2) - m.get(1, 2) * m.get(2, 0))
                + m.get(0, 2) * (m.get(1, 0) * m.get(2, 1) - m.get(1, 1) * m.get(2, 0))
        };
        let d = det3(&ata);
        let solve = |col: usize| {
            let m = Matrix::from_fn(3, 3, |i, j| if j == col { aty.get(i, 0) } else { ata.get(i, j) });
            det3(&m) / d
        };
        let fit = lasso_fit(&x, &y, 0.0).unwrap();
        assert!(fit.converged);
        assert!((fit.intercept - solve(0)).abs() < 1e-6);
        assert!((fit.weights[0] - solve(1)).abs() < 1e-6);
        assert!((fit.weights[1] - solve(2)).abs() < 1e-6);
    }

    #[test]
    fn null_threshold_zeroes_weights() {
        let x = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.5], [2.0, -1.0], [3.0, 0.0]]);
        let y = [1.0, 2.0, 0.5, 4.0];
        let lam = null_lambda(&x, &y);
        let fit = lasso_fit(&x, &y, lam).unwrap();
        assert!(fit.weights.iter().all(|&w| w == 0.0));
        assert!((fit.intercept - 1.875).abs() < 1e-12);
        let fit = lasso_fit(&x, &y, lam * 0.9).unwrap();
        assert!(fit.weights.iter().any(|&w| w != 0.0));
    }
}
