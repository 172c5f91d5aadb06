//! Objective, Adam training loop with early stopping, and checkpoints.

mod adam;
mod checkpoint;

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, clip_global_norm, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, TensorEntry};

use crate::dataset::{LabelScaling, SampleSet};
use crate::error::{Error, Result};
use crate::eval;
use crate::graphs::{csv_err, GraphSet};
use crate::model::{check_zone_order, network_forward, MgcNetwork, NetworkConfig, Sharing, Variant, N_GRAPHS};
use crate::mtl::{j1_on_tape, j2_on_tape, Covariances, FlipFlopConfig, FlipFlopReport, DEFAULT_ALPHA};
use crate::numcore::{Matrix, Tape, Var};

pub const DEFAULT_BETA1: f64 = 0.001;
pub const DEFAULT_BETA2: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub alpha: f64,
    /// Cross-task penalty weight; defaults to 0.001 for variants with
    /// cross-connected layers and must be absent or 0 otherwise.
    pub beta1: Option<f64>,
    /// Covariance-prior penalty weight; defaults to 0.1 for variants with
    /// prior-tied layers and must be absent or 0 otherwise.
    pub beta2: Option<f64>,
    /// Plain L2 penalty on every weight matrix.
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Global gradient-norm cap; `null` disables clipping.
    pub grad_clip: Option<f64>,
    pub divergence_threshold: f64,
    pub network: NetworkConfig,
    pub flip_flop: FlipFlopConfig,
    pub update_covariances: bool,
    /// Keep cross-task weights at zero.
    pub freeze_inter_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Mgc,
            learning_rate: 0.001,
            batch_size: 16,
            alpha: DEFAULT_ALPHA,
            beta1: None,
            beta2: None,
            weight_decay: 0.0,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            grad_clip: Some(5.0),
            divergence_threshold: 1e12,
            network: NetworkConfig::default(),
            flip_flop: FlipFlopConfig::default(),
            update_covariances: true,
            freeze_inter_weights: false,
        }
    }
}

/// Penalty weights actually applied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Penalties {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Penalties {
    pub fn none() -> Self {
        Penalties {
            alpha: DEFAULT_ALPHA,
            beta1: 0.0,
            beta2: 0.0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn penalties(&self) -> Result<Penalties> {
        let tags = self.variant.sharing(self.network.layer_sizes.len());
        let has_cross = tags.contains(&Sharing::Rct);
        let has_prior = tags.contains(&Sharing::Mlr);
        let resolve = |given: Option<f64>, applies: bool, default: f64, name: &str| -> Result<f64> {
            match given {
                Some(v) if !(v >= 0.0) || !v.is_finite() => {
                    Err(Error::validation(format!("{name} must be a finite nonnegative number, got {v}")))
                }
                Some(v) if v > 0.0 && !applies => Err(Error::validation(format!(
                    "{name} = {v} has no effect on variant {}; its penalty set does not include that term",
                    self.variant
                ))),
                Some(v) => Ok(v),
                None if applies => Ok(default),
                None => Ok(0.0),
            }
        };
        Ok(Penalties {
            alpha: self.alpha,
            beta1: resolve(self.beta1, has_cross, DEFAULT_BETA1, "beta1")?,
            beta2: resolve(self.beta2, has_prior, DEFAULT_BETA2, "beta2")?,
            weight_decay: self.weight_decay,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::validation("learning_rate, batch_size and max_epochs must be positive"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::validation(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::validation("weight_decay must be nonnegative"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::validation("grad_clip must be positive or null"));
            }
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::validation("divergence_threshold must be positive"));
        }
        self.flip_flop.validate()?;
        self.penalties()?;
        Ok(())
    }

    /// Copy with `beta1`/`beta2` filled in.
    pub fn resolved(&self) -> Result<TrainConfig> {
        self.validate()?;
        let p = self.penalties()?;
        Ok(TrainConfig {
            beta1: Some(p.beta1),
            beta2: Some(p.beta2),
            ..self.clone()
        })
    }
}

/// Objective terms for one batch. `j1` and `j2` are summed over the layers
/// they apply to, before weighting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParts {
    pub sq: f64,
    pub j1: f64,
    pub j2: f64,
    pub l2: f64,
    pub total: f64,
}

impl ObjectiveParts {
    /// `sq + β1 j1 + (β2/2) j2 + wd l2`.
    pub fn compose(&self, p: &Penalties) -> f64 {
        self.sq + p.beta1 * self.j1 + 0.5 * p.beta2 * self.j2 + p.weight_decay * self.l2
    }
}

/// Records the objective of one batch. `inputs[m]` and `labels[m]` stack
/// `batch_size` samples of mode `m`; squared errors are in raw counts and
/// averaged over the batch.
#[allow(clippy::too_many_arguments)]
pub fn record_objective(
    tape: &mut Tape,
    net: &MgcNetwork,
    vars: &[Var],
    covariances: &[Option<Covariances>],
    graphs: &[[Arc<Matrix>; N_GRAPHS]],
    inputs: &[Matrix],
    labels: &[Matrix],
    scaling: &LabelScaling,
    batch_size: usize,
    pen: &Penalties,
) -> Result<(Var, ObjectiveParts)> {
    let x: Vec<Var> = inputs.iter().map(|m| tape.constant(m.clone())).collect();
    let preds = net.forward_counts(tape, vars, &x, graphs, scaling)?;
    let mut sq_terms = Vec::with_capacity(preds.len());
    for (p, y) in preds.into_iter().zip(labels) {
        let y = tape.constant(y.clone());
        let d = tape.sub(p, y)?;
        sq_terms.push((tape.sum_squares(d), 1.0 / batch_size as f64));
    }
    let mut terms = sq_terms.clone();
    let sq_node = tape.weighted_sum(&sq_terms)?;
    let mut parts = ObjectiveParts {
        sq: tape.scalar(sq_node),
        j1: 0.0,
        j2: 0.0,
        l2: 0.0,
        total: 0.0,
    };
    for (li, (layer, (w, _))) in net.layers.iter().zip(net.split_vars(vars)).enumerate() {
        match layer.sharing {
            Sharing::Rct => {
                let j = j1_on_tape(tape, w, layer.n_modes, pen.alpha)?;
                parts.j1 += tape.scalar(j);
                if pen.beta1 != 0.0 {
                    terms.push((j, pen.beta1));
                }
            }
            Sharing::Mlr => {
                let cov = covariances
                    .get(li)
                    .and_then(Option::as_ref)
                    .ok_or_else(|| Error::Usage(format!("layer {li} has no covariance state")))?;
                let j = j2_on_tape(tape, w, cov)?;
                parts.j2 += tape.scalar(j);
                if pen.beta2 != 0.0 {
                    terms.push((j, 0.5 * pen.beta2));
                }
            }
            Sharing::None => {}
        }
        if pen.weight_decay != 0.0 {
            for &wv in w {
                let s = tape.sum_squares(wv);
                parts.l2 += tape.scalar(s);
                terms.push((s, pen.weight_decay));
            }
        }
    }
    let total = tape.weighted_sum(&terms)?;
    parts.total = tape.scalar(total);
    Ok((total, parts))
}

/// Objective value with every parameter held constant.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    net: &MgcNetwork,
    covariances: &[Option<Covariances>],
    graphs: &[[Arc<Matrix>; N_GRAPHS]],
    inputs: &[Matrix],
    labels: &[Matrix],
    scaling: &LabelScaling,
    batch_size: usize,
    pen: &Penalties,
) -> Result<ObjectiveParts> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = net.params().into_iter().map(|p| tape.constant(p.clone())).collect();
    let (_, parts) = record_objective(
        &mut tape, net, &vars, covariances, graphs, inputs, labels, scaling, batch_size, pen,
    )?;
    Ok(parts)
}

/// Objective and its gradient for every parameter not masked by `frozen`.
#[allow(clippy::too_many_arguments)]
pub fn objective_gradients(
    net: &MgcNetwork,
    frozen: Option<&[bool]>,
    covariances: &[Option<Covariances>],
    graphs: &[[Arc<Matrix>; N_GRAPHS]],
    inputs: &[Matrix],
    labels: &[Matrix],
    scaling: &LabelScaling,
    batch_size: usize,
    pen: &Penalties,
) -> Result<(ObjectiveParts, Vec<Option<Matrix>>)> {
    let mut tape = Tape::new();
    let vars = net.register(&mut tape, frozen);
    let (total, parts) = record_objective(
        &mut tape, net, &vars, covariances, graphs, inputs, labels, scaling, batch_size, pen,
    )?;
    let mut grads = tape.backward(total)?;
    let out = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if frozen.is_some_and(|f| f[i]) {
                None
            } else {
                grads.take(v)
            }
        })
        .collect();
    Ok((parts, out))
}

/// A model the training loop can optimize.
pub trait Learner: Clone {
    fn params(&self) -> Vec<&Matrix>;
    fn params_mut(&mut self) -> Vec<&mut Matrix>;
    /// Objective and gradients on the given samples of `set`.
    fn batch_gradients(&self, set: &SampleSet, batch: &[usize]) -> Result<(ObjectiveParts, Vec<Option<Matrix>>)>;
    /// Unclipped raw-count predictions per mode.
    fn predict(&self, set: &SampleSet) -> Result<Vec<Matrix>>;
    /// Called once after the last batch of every epoch.
    fn end_epoch(&mut self) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub divergence_threshold: f64,
}

impl From<&TrainConfig> for FitOptions {
    fn from(c: &TrainConfig) -> Self {
        FitOptions {
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            max_epochs: c.max_epochs,
            patience: c.patience,
            seed: c.seed,
            grad_clip: c.grad_clip,
            divergence_threshold: c.divergence_threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub parts: ObjectiveParts,
    /// Per-mode validation RMSE, on the last step of each epoch.
    pub val_rmse: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_objective: f64,
    pub val_rmse: f64,
    pub val_rmse_per_mode: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
    pub stopped_early: bool,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

/// Mean over samples of the summed squared error across modes.
pub fn mean_squared_loss<L: Learner>(learner: &L, set: &SampleSet) -> Result<f64> {
    let preds = learner.predict(set)?;
    let mut s = 0.0;
    for (m, p) in preds.iter().enumerate() {
        s += p.sub(set.labels(m))?.sum_squares();
    }
    Ok(s / set.len() as f64)
}

fn val_metrics<L: Learner>(learner: &L, set: &SampleSet) -> Result<(f64, Vec<f64>)> {
    let preds = learner.predict(set)?;
    let per_mode = eval::evaluate(&preds, set)?.iter().map(|m| m.rmse).collect();
    Ok((eval::pooled_rmse(&preds, set)?, per_mode))
}

/// Mini-batch Adam with per-epoch shuffling and early stopping on pooled
/// validation RMSE. On return the learner holds the best epoch's state;
/// on divergence it is restored to the best state seen so far and an
/// error is returned.
pub fn fit_learner<L: Learner>(learner: &mut L, train: &SampleSet, val: &SampleSet, opts: &FitOptions) -> Result<FitReport> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::validation("training and validation splits must be non-empty"));
    }
    let mut adam = AdamState::new(&learner.params());
    let initial_train_loss = mean_squared_loss(learner, train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(20);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = learner.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut bad_epochs = 0;
    let mut stopped_early = false;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    for epoch in 1..=opts.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n_steps = 0;
        for (step, batch) in order.chunks(opts.batch_size).enumerate() {
            let (parts, mut grads) = learner.batch_gradients(train, batch)?;
            if !parts.total.is_finite() || parts.total > opts.divergence_threshold {
                *learner = best;
                return Err(Error::numeric(format!(
                    "objective diverged at epoch {epoch}, step {} (value {:e}); parameters restored to epoch {best_epoch}. \
                     Try a smaller learning rate, enabling gradient clipping, or a larger covariance ridge",
                    step + 1,
                    parts.total
                )));
            }
            if let Some(c) = opts.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            adam.step(&mut learner.params_mut(), &grads, opts.learning_rate)?;
            sum += parts.total;
            n_steps += 1;
            steps.push(StepLog {
                epoch,
                step: step + 1,
                parts,
                val_rmse: None,
            });
        }
        learner.end_epoch()?;
        let (val_rmse, per_mode) = val_metrics(learner, val)?;
        if !val_rmse.is_finite() {
            *learner = best;
            return Err(Error::numeric(format!(
                "validation RMSE is not finite after epoch {epoch}; parameters restored to epoch {best_epoch}"
            )));
        }
        if let Some(last) = steps.last_mut() {
            last.val_rmse = Some(per_mode.clone());
        }
        epochs.push(EpochLog {
            epoch,
            mean_objective: sum / n_steps as f64,
            val_rmse,
            val_rmse_per_mode: per_mode,
        });
        if val_rmse < best_val {
            best_val = val_rmse;
            best_epoch = epoch;
            best = learner.clone();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > opts.patience {
                stopped_early = true;
                break;
            }
        }
    }
    *learner = best;
    Ok(FitReport {
        initial_train_loss,
        final_train_loss: mean_squared_loss(learner, train)?,
        best_epoch,
        best_val_rmse: best_val,
        stopped_early,
        steps,
        epochs,
    })
}

/// Graph-convolutional learner with its penalty state.
#[derive(Clone, Debug)]
pub struct MgcLearner {
    pub network: MgcNetwork,
    /// Covariance state for prior-tied layers, `None` elsewhere.
    pub covariances: Vec<Option<Covariances>>,
    pub graphs: GraphSet,
    pub penalties: Penalties,
    pub flip_flop: Option<FlipFlopConfig>,
    pub last_flip_flop: Vec<Option<FlipFlopReport>>,
    per_mode: Vec<[Arc<Matrix>; N_GRAPHS]>,
    frozen: Option<Vec<bool>>,
}

impl MgcLearner {
    pub fn new(cfg: &TrainConfig, graphs: GraphSet, n_features: usize) -> Result<Self> {
        cfg.validate()?;
        let n_modes = graphs.n_modes();
        let mut network = MgcNetwork::new(cfg.variant, n_modes, n_features, &cfg.network, cfg.seed)?;
        let frozen = if cfg.freeze_inter_weights {
            network.zero_inter_weights();
            Some(network.inter_mask())
        } else {
            None
        };
        let covariances = network
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                (layer.sharing == Sharing::Mlr).then(|| {
                    Covariances::identity(
                        l,
                        [layer.stacked_in(), layer.fan_out, n_modes],
                        cfg.flip_flop.fix_input,
                        cfg.flip_flop.fix_output,
                    )
                })
            })
            .collect();
        Self::from_parts(
            network,
            covariances,
            graphs,
            cfg.penalties()?,
            cfg.update_covariances.then(|| cfg.flip_flop.clone()),
            frozen,
        )
    }

    pub fn from_parts(
        network: MgcNetwork,
        covariances: Vec<Option<Covariances>>,
        graphs: GraphSet,
        penalties: Penalties,
        flip_flop: Option<FlipFlopConfig>,
        frozen: Option<Vec<bool>>,
    ) -> Result<Self> {
        network.validate()?;
        if graphs.n_modes() != network.n_modes() {
            return Err(Error::validation("graph set and network have different mode counts"));
        }
        if covariances.len() != network.layers.len() {
            return Err(Error::validation("one covariance slot per layer required"));
        }
        let per_mode = (0..graphs.n_modes()).map(|m| graphs.normalized(m)).collect();
        Ok(MgcLearner {
            last_flip_flop: vec![None; network.layers.len()],
            network,
            covariances,
            graphs,
            penalties,
            flip_flop,
            per_mode,
            frozen,
        })
    }

    pub fn graphs_per_mode(&self) -> &[[Arc<Matrix>; N_GRAPHS]] {
        &self.per_mode
    }
}

impl Learner for MgcLearner {
    fn params(&self) -> Vec<&Matrix> {
        self.network.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.network.params_mut()
    }

    fn batch_gradients(&self, set: &SampleSet, batch: &[usize]) -> Result<(ObjectiveParts, Vec<Option<Matrix>>)> {
        let (x, y) = set.gather(batch);
        objective_gradients(
            &self.network,
            self.frozen.as_deref(),
            &self.covariances,
            &self.per_mode,
            &x,
            &y,
            &set.normalization().labels,
            batch.len(),
            &self.penalties,
        )
    }

    fn predict(&self, set: &SampleSet) -> Result<Vec<Matrix>> {
        network_forward(&self.network, &self.graphs, set)
    }

    fn end_epoch(&mut self) -> Result<()> {
        let Some(cfg) = &self.flip_flop else {
            return Ok(());
        };
        for (l, layer) in self.network.layers.iter().enumerate() {
            if let Some(cov) = self.covariances[l].as_mut() {
                let report = cov.flip_flop(&layer.weight_tensor(), cfg)?;
                self.last_flip_flop[l] = Some(report);
            }
        }
        Ok(())
    }
}

/// Outcome of one training job.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub learner: MgcLearner,
    pub report: FitReport,
}

/// Trains one network variant. `cfg` is stored with its penalty weights
/// resolved.
pub fn fit(train: &SampleSet, val: &SampleSet, graphs: &GraphSet, cfg: &TrainConfig) -> Result<TrainRun> {
    let config = cfg.resolved()?;
    check_zone_order(graphs, train)?;
    check_zone_order(graphs, val)?;
    let mut learner = MgcLearner::new(&config, graphs.clone(), crate::dataset::LAG_OFFSETS.len())?;
    let report = fit_learner(&mut learner, train, val, &FitOptions::from(&config))?;
    Ok(TrainRun {
        config,
        learner,
        report,
    })
}

/// `epoch,step,sq_loss,j1,j2,val_rmse_<mode>...`; validation columns are
/// empty except on the last step of each epoch.
pub fn write_train_log(path: &Path, report: &FitReport, modes: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["epoch".to_string(), "step".into(), "sq_loss".into(), "j1".into(), "j2".into()];
    header.extend(modes.iter().map(|m| format!("val_rmse_{m}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for s in &report.steps {
        let mut rec = vec![
            s.epoch.to_string(),
            s.step.to_string(),
            s.parts.sq.to_string(),
            s.parts.j1.to_string(),
            s.parts.j2.to_string(),
        ];
        match &s.val_rmse {
            Some(v) => rec.extend(v.iter().map(f64::to_string)),
            None => rec.extend(modes.iter().map(|_| String::new())),
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn penalty_defaults_follow_variant() {
        let mut cfg = TrainConfig::default();
        let p = cfg.penalties().unwrap();
        assert_eq!((p.beta1, p.beta2), (0.0, 0.0));
        cfg.variant = Variant::Mix;
        let p = cfg.penalties().unwrap();
        assert_eq!((p.beta1, p.beta2), (DEFAULT_BETA1, DEFAULT_BETA2));
        cfg.variant = Variant::Rct;
        assert_eq!(cfg.penalties().unwrap().beta2, 0.0);
    }

    #[test]
    fn inconsistent_penalty_is_rejected() {
        let cfg = TrainConfig {
            beta1: Some(0.01),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            variant: Variant::Rct,
            beta2: Some(0.1),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            beta1: Some(0.0),
            ..Default::default()
        };
        assert!(cfg.validate().is_ok());
    }
}
