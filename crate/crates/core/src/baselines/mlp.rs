use std::sync::Arc;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelScaling, SampleSet};
use crate::error::{Error, Result};
use crate::numcore::{Matrix, Tape, Var};
use crate::train::{fit_learner, FitOptions, FitReport, Learner, ObjectiveParts};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig { hidden: vec![128, 128] }
    }
}

/// One dense network per mode. Each zone is a separate input row holding
/// the lag features of every mode; no graph structure is used.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpLearner {
    n_modes: usize,
    /// `[mode][layer]`
    pub weights: Vec<Vec<Matrix>>,
    pub biases: Vec<Vec<Matrix>>,
}

impl MlpLearner {
    pub fn new(n_modes: usize, n_features: usize, cfg: &MlpConfig, seed: u64) -> Result<Self> {
        if n_modes == 0 || n_features == 0 || cfg.hidden.contains(&0) {
            return Err(Error::validation("dense baseline needs modes, features and nonzero widths"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(30);
        let mut sizes = vec![n_features * n_modes];
        sizes.extend(&cfg.hidden);
        sizes.push(1);
        let mut weights = Vec::with_capacity(n_modes);
        let mut biases = Vec::with_capacity(n_modes);
        for _ in 0..n_modes {
            let mut w = Vec::new();
            let mut b = Vec::new();
            for pair in sizes.windows(2) {
                let limit = (6.0 / (pair[0] + pair[1]) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("positive limit");
                w.push(Matrix::from_fn(pair[0], pair[1], |_, _| dist.sample(&mut rng)));
                b.push(Matrix::zeros(1, pair[1]));
            }
            weights.push(w);
            biases.push(b);
        }
        Ok(MlpLearner {
            n_modes,
            weights,
            biases,
        })
    }

    fn record(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        inputs: &[Matrix],
        scaling: &LabelScaling,
    ) -> Result<Vec<Var>> {
        let refs: Vec<&Matrix> = inputs.iter().collect();
        let x = tape.constant(Matrix::concat_cols(&refs)?);
        let depth = self.weights[0].len();
        let mut out = Vec::with_capacity(self.n_modes);
        for m in 0..self.n_modes {
            let base = m * 2 * depth;
            let mut h = x;
            for l in 0..depth {
                let z = tape.matmul(h, vars[base + 2 * l])?;
                let z = tape.add_row(z, vars[base + 2 * l + 1])?;
                h = if l + 1 < depth { tape.relu(z) } else { z };
            }
            let rows = tape.value(h).rows();
            let n = scaling.mean[m].len();
            let scale: Vec<f64> = (0..rows).map(|r| scaling.std[m][r % n]).collect();
            let shift: Vec<f64> = (0..rows).map(|r| scaling.mean[m][r % n]).collect();
            out.push(tape.row_affine(h, Arc::new(scale), &shift)?);
        }
        Ok(out)
    }
}

impl Learner for MlpLearner {
    fn params(&self) -> Vec<&Matrix> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().zip(b).flat_map(|(w, b)| [w, b]))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().zip(b.iter_mut()).flat_map(|(w, b)| [w, b]))
            .collect()
    }

    fn batch_gradients(&self, set: &SampleSet, batch: &[usize]) -> Result<(ObjectiveParts, Vec<Option<Matrix>>)> {
        let (x, y) = set.gather(batch);
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params().into_iter().map(|p| tape.param(p.clone())).collect();
        let preds = self.record(&mut tape, &vars, &x, &set.normalization().labels)?;
        let mut terms = Vec::with_capacity(preds.len());
        for (p, y) in preds.into_iter().zip(y) {
            let y = tape.constant(y);
            let d = tape.sub(p, y)?;
            terms.push((tape.sum_squares(d), 1.0 / batch.len() as f64));
        }
        let total = tape.weighted_sum(&terms)?;
        let value = tape.scalar(total);
        let mut grads = tape.backward(total)?;
        let g = vars.iter().map(|&v| grads.take(v)).collect();
        let parts = ObjectiveParts {
            sq: value,
            j1: 0.0,
            j2: 0.0,
            l2: 0.0,
            total: value,
        };
        Ok((parts, g))
    }

    fn predict(&self, set: &SampleSet) -> Result<Vec<Matrix>> {
        let idx: Vec<usize> = (0..set.len()).collect();
        let mut out: Vec<Vec<f64>> = vec![Vec::new(); self.n_modes];
        let mut tape = Tape::new();
        for chunk in idx.chunks(64) {
            tape.clear();
            let (x, _) = set.gather(chunk);
            let vars: Vec<Var> = self.params().into_iter().map(|p| tape.constant(p.clone())).collect();
            let preds = self.record(&mut tape, &vars, &x, &set.normalization().labels)?;
            for (m, p) in preds.into_iter().enumerate() {
                out[m].extend_from_slice(tape.value(p).data());
            }
        }
        out.into_iter().map(|d| Matrix::new(d.len(), 1, d)).collect()
    }
}

pub fn fit_mlp(train: &SampleSet, val: &SampleSet, cfg: &MlpConfig, opts: &FitOptions) -> Result<(MlpLearner, FitReport)> {
    let mut learner = MlpLearner::new(train.n_modes(), 4, cfg, opts.seed)?;
    let report = fit_learner(&mut learner, train, val, opts)?;
    Ok((learner, report))
}
