//! Multi-graph convolution layers and the per-mode network stacks.
//!
//! A layer maps each mode's zone features `H` (`zones x f_in`) to
//! `act(concat(Â_N H, Â_D H, Â_F H, Â_P H) W + b)`. Cross-connected layers
//! sum such branches over every source mode before the activation, each
//! branch using its source mode's graphs.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelScaling, SampleSet};
use crate::error::{Error, Result};
use crate::graphs::GraphSet;
use crate::numcore::{Matrix, Tape, Tensor3, Var};

/// Number of graphs each layer convolves over.
pub const N_GRAPHS: usize = 4;
pub const DEFAULT_LAYER_SIZES: [usize; 4] = [128, 256, 128, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "MGC")]
    Mgc,
    #[serde(rename = "RCT")]
    Rct,
    #[serde(rename = "MLR")]
    Mlr,
    #[serde(rename = "MIX")]
    Mix,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Mgc, Variant::Rct, Variant::Mlr, Variant::Mix];

    /// Sharing tag of every layer. The mixed network cross-connects the
    /// lower half and ties the upper half through the covariance prior.
    pub fn sharing(self, n_layers: usize) -> Vec<Sharing> {
        (0..n_layers)
            .map(|l| match self {
                Variant::Mgc => Sharing::None,
                Variant::Rct => Sharing::Rct,
                Variant::Mlr => Sharing::Mlr,
                Variant::Mix if l < n_layers / 2 => Sharing::Rct,
                Variant::Mix => Sharing::Mlr,
            })
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mgc => "MGC",
            Variant::Rct => "RCT",
            Variant::Mlr => "MLR",
            Variant::Mix => "MIX",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MGC" => Ok(Variant::Mgc),
            "RCT" => Ok(Variant::Rct),
            "MLR" => Ok(Variant::Mlr),
            "MIX" => Ok(Variant::Mix),
            _ => Err(Error::validation(format!("unknown variant {s:?}; expected MGC, RCT, MLR or MIX"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sharing {
    None,
    Rct,
    Mlr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MgcLayer {
    pub sharing: Sharing,
    pub activation: Activation,
    pub n_modes: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    /// Cross-connected layers: `n_modes²` matrices, `weights[k * n_modes + m]`
    /// maps source mode `k` into target mode `m`. Otherwise one per mode.
    pub weights: Vec<Matrix>,
    /// One `1 x fan_out` row per target mode.
    pub biases: Vec<Matrix>,
}

impl MgcLayer {
    /// Width of the concatenated graph features.
    pub fn stacked_in(&self) -> usize {
        N_GRAPHS * self.fan_in
    }

    pub fn is_cross(&self) -> bool {
        self.sharing == Sharing::Rct
    }

    pub fn weight_index(&self, source: usize, target: usize) -> Option<usize> {
        if self.is_cross() {
            Some(source * self.n_modes + target)
        } else {
            (source == target).then_some(target)
        }
    }

    /// Whether `weights[idx]` connects two different modes.
    pub fn is_inter(&self, idx: usize) -> bool {
        self.is_cross() && idx / self.n_modes != idx % self.n_modes
    }

    pub fn intra(&self, mode: usize) -> &Matrix {
        &self.weights[self.weight_index(mode, mode).expect("intra weight exists")]
    }

    /// Intra-task weights stacked into an `(f̃_in, f_out, modes)` tensor.
    pub fn weight_tensor(&self) -> Tensor3 {
        let slices: Vec<&Matrix> = (0..self.n_modes).map(|m| self.intra(m)).collect();
        Tensor3::stack_frontal(&slices).expect("intra weights share a shape")
    }

    fn check(&self) -> Result<()> {
        let expect = if self.is_cross() { self.n_modes * self.n_modes } else { self.n_modes };
        if self.weights.len() != expect {
            return Err(Error::validation(format!(
                "layer has {} weight matrices, {} required ({:?} sharing over {} modes); cross-task weights missing",
                self.weights.len(),
                expect,
                self.sharing,
                self.n_modes
            )));
        }
        if self.biases.len() != self.n_modes {
            return Err(Error::validation("one bias per mode required"));
        }
        for w in &self.weights {
            if w.shape() != (self.stacked_in(), self.fan_out) {
                return Err(Error::Shape {
                    op: "mgc_layer",
                    lhs: w.shape(),
                    rhs: (self.stacked_in(), self.fan_out),
                });
            }
        }
        for b in &self.biases {
            if b.shape() != (1, self.fan_out) {
                return Err(Error::Shape {
                    op: "mgc_layer",
                    lhs: b.shape(),
                    rhs: (1, self.fan_out),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub layer_sizes: Vec<usize>,
    /// Draw identical intra-task weights for every mode.
    pub tie_initialization: bool,
    /// Scale of cross-task weights relative to the intra-task range.
    pub inter_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            layer_sizes: DEFAULT_LAYER_SIZES.to_vec(),
            tie_initialization: true,
            inter_scale: 0.1,
        }
    }
}

/// Per-mode MGC stacks, optionally linked across modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MgcNetwork {
    pub variant: Variant,
    pub n_features: usize,
    pub layers: Vec<MgcLayer>,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, limit: f64) -> Matrix {
    if limit == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite positive limit");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

impl MgcNetwork {
    /// Hidden layers use ReLU, the last layer is linear. Intra-task weights
    /// come from one random stream and cross-task weights from another, so
    /// every variant built with the same seed starts from the same
    /// intra-task weights.
    pub fn new(variant: Variant, n_modes: usize, n_features: usize, cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        if n_modes == 0 || n_features == 0 || cfg.layer_sizes.is_empty() || cfg.layer_sizes.contains(&0) {
            return Err(Error::validation("network needs modes, features and nonzero layer sizes"));
        }
        if cfg.layer_sizes.last() != Some(&1) {
            return Err(Error::validation("the last layer must have one unit per zone"));
        }
        if !(cfg.inter_scale >= 0.0) {
            return Err(Error::validation("inter_scale must be nonnegative"));
        }
        let sharing = variant.sharing(cfg.layer_sizes.len());
        let mut intra_rng = rng_stream(seed, 10);
        let mut inter_rng = rng_stream(seed, 11);
        let mut layers = Vec::new();
        let mut fan_in = n_features;
        for (l, &fan_out) in cfg.layer_sizes.iter().enumerate() {
            let stacked = N_GRAPHS * fan_in;
            let limit = (6.0 / (stacked + fan_out) as f64).sqrt();
            let mut intra: Vec<Matrix> = Vec::with_capacity(n_modes);
            for m in 0..n_modes {
                if cfg.tie_initialization && m > 0 {
                    intra.push(intra[0].clone());
                } else {
                    intra.push(uniform_matrix(&mut intra_rng, stacked, fan_out, limit));
                }
            }
            let weights = if sharing[l] == Sharing::Rct {
                let mut w = Vec::with_capacity(n_modes * n_modes);
                for k in 0..n_modes {
                    for m in 0..n_modes {
                        if k == m {
                            w.push(intra[m].clone());
                        } else {
                            w.push(uniform_matrix(&mut inter_rng, stacked, fan_out, limit * cfg.inter_scale));
                        }
                    }
                }
                w
            } else {
                intra
            };
            layers.push(MgcLayer {
                sharing: sharing[l],
                activation: if l + 1 == cfg.layer_sizes.len() {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
                n_modes,
                fan_in,
                fan_out,
                weights,
                biases: vec![Matrix::zeros(1, fan_out); n_modes],
            });
            fan_in = fan_out;
        }
        Ok(MgcNetwork {
            variant,
            n_features,
            layers,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.layers[0].n_modes
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.fan_out).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut fan_in = self.n_features;
        for l in &self.layers {
            if l.fan_in != fan_in || l.n_modes != self.n_modes() {
                return Err(Error::validation("layer widths or mode counts do not chain"));
            }
            l.check()?;
            fan_in = l.fan_out;
        }
        if fan_in != 1 {
            return Err(Error::validation("the last layer must have one unit per zone"));
        }
        Ok(())
    }

    /// All parameters in a fixed order: per layer, weights then biases.
    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases)).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (li, l) in self.layers.iter().enumerate() {
            for idx in 0..l.weights.len() {
                let (k, m) = if l.is_cross() { (idx / l.n_modes, idx % l.n_modes) } else { (idx, idx) };
                out.push(format!("l{li}.w.{k}->{m}"));
            }
            for m in 0..l.n_modes {
                out.push(format!("l{li}.b.{m}"));
            }
        }
        out
    }

    /// Flags parameters that map between two different modes.
    pub fn inter_mask(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend((0..l.weights.len()).map(|i| l.is_inter(i)));
            out.extend(std::iter::repeat_n(false, l.n_modes));
        }
        out
    }

    /// Zeroes every cross-task weight.
    pub fn zero_inter_weights(&mut self) {
        for l in &mut self.layers {
            for idx in 0..l.weights.len() {
                if l.is_inter(idx) {
                    let (r, c) = l.weights[idx].shape();
                    l.weights[idx] = Matrix::zeros(r, c);
                }
            }
        }
    }

    /// Puts every parameter on the tape; masked ones become constants.
    pub fn register(&self, tape: &mut Tape, frozen: Option<&[bool]>) -> Vec<Var> {
        self.params()
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                if frozen.is_some_and(|f| f[i]) {
                    tape.constant(p.clone())
                } else {
                    tape.param(p.clone())
                }
            })
            .collect()
    }

    /// Per-layer slices of a registered parameter list.
    pub fn split_vars<'a>(&self, vars: &'a [Var]) -> Vec<(&'a [Var], &'a [Var])> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for l in &self.layers {
            let nw = l.weights.len();
            out.push((&vars[at..at + nw], &vars[at + nw..at + nw + l.n_modes]));
            at += nw + l.n_modes;
        }
        out
    }

    /// Network outputs per mode, `(batch * zones) x 1`, before the label
    /// scaling. `inputs[m]` holds mode `m`'s stacked standardized features.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        inputs: &[Var],
        graphs: &[[Arc<Matrix>; N_GRAPHS]],
    ) -> Result<Vec<Var>> {
        if inputs.len() != self.n_modes() || graphs.len() != self.n_modes() {
            return Err(Error::validation("one input and one graph set per mode required"));
        }
        let mut h = inputs.to_vec();
        for (layer, (w, b)) in self.layers.iter().zip(self.split_vars(vars)) {
            h = layer_on_tape(tape, layer, w, b, &h, graphs)?;
        }
        Ok(h)
    }

    /// Forward pass in raw-count units: `mean + std * output` per zone.
    pub fn forward_counts(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        inputs: &[Var],
        graphs: &[[Arc<Matrix>; N_GRAPHS]],
        scaling: &LabelScaling,
    ) -> Result<Vec<Var>> {
        let outs = self.forward_on(tape, vars, inputs, graphs)?;
        outs.into_iter()
            .enumerate()
            .map(|(m, out)| {
                let rows = tape.value(out).rows();
                let n = scaling.mean[m].len();
                let scale: Vec<f64> = (0..rows).map(|r| scaling.std[m][r % n]).collect();
                let shift: Vec<f64> = (0..rows).map(|r| scaling.mean[m][r % n]).collect();
                tape.row_affine(out, Arc::new(scale), &shift)
            })
            .collect()
    }
}

/// Graph-stacked features `concat(Â_N H, Â_D H, Â_F H, Â_P H)`.
fn stacked(tape: &mut Tape, h: Var, graphs: &[Arc<Matrix>; N_GRAPHS]) -> Result<Var> {
    let mut parts = [h; N_GRAPHS];
    for (p, a) in parts.iter_mut().zip(graphs) {
        *p = tape.propagate(a.clone(), h)?;
    }
    tape.concat_cols(&parts)
}

/// One layer for every mode. `weights` and `biases` follow the layout of
/// [`MgcLayer`].
pub fn layer_on_tape(
    tape: &mut Tape,
    layer: &MgcLayer,
    weights: &[Var],
    biases: &[Var],
    inputs: &[Var],
    graphs: &[[Arc<Matrix>; N_GRAPHS]],
) -> Result<Vec<Var>> {
    let nm = layer.n_modes;
    let expect = if layer.is_cross() { nm * nm } else { nm };
    if weights.len() != expect {
        return Err(Error::validation(format!(
            "{:?} layer over {nm} modes needs {expect} weight matrices, got {}; cross-task weights missing",
            layer.sharing,
            weights.len()
        )));
    }
    let stacked_inputs: Vec<Var> = inputs
        .iter()
        .zip(graphs)
        .map(|(&h, g)| stacked(tape, h, g))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(nm);
    for m in 0..nm {
        let mut z = None;
        let sources: Vec<usize> = if layer.is_cross() { (0..nm).collect() } else { vec![m] };
        for k in sources {
            let idx = layer.weight_index(k, m).expect("index exists for listed sources");
            let branch = tape.matmul(stacked_inputs[k], weights[idx])?;
            z = Some(match z {
                None => branch,
                Some(acc) => tape.add(acc, branch)?,
            });
        }
        let z = tape.add_row(z.expect("at least one source"), biases[m])?;
        out.push(match layer.activation {
            Activation::Relu => tape.relu(z),
            Activation::Identity => z,
        });
    }
    Ok(out)
}

/// Single-mode layer `act(Σ_r Â_r H W_r + b)` with `W` the row-stacked
/// `[W_N; W_D; W_F; W_P]`.
pub fn mgc_forward(
    h: &Matrix,
    graphs: &[Arc<Matrix>; N_GRAPHS],
    weight: &Matrix,
    bias: &Matrix,
    activation: Activation,
) -> Result<Matrix> {
    let layer = MgcLayer {
        sharing: Sharing::None,
        activation,
        n_modes: 1,
        fan_in: h.cols(),
        fan_out: weight.cols(),
        weights: vec![weight.clone()],
        biases: vec![bias.clone()],
    };
    Ok(layer_forward(&layer, std::slice::from_ref(h), std::slice::from_ref(graphs))?.remove(0))
}

/// One layer evaluated for every mode.
pub fn layer_forward(layer: &MgcLayer, inputs: &[Matrix], graphs: &[[Arc<Matrix>; N_GRAPHS]]) -> Result<Vec<Matrix>> {
    layer.check()?;
    let mut tape = Tape::new();
    let w: Vec<Var> = layer.weights.iter().map(|w| tape.constant(w.clone())).collect();
    let b: Vec<Var> = layer.biases.iter().map(|b| tape.constant(b.clone())).collect();
    let x: Vec<Var> = inputs.iter().map(|h| tape.constant(h.clone())).collect();
    let out = layer_on_tape(&mut tape, layer, &w, &b, &x, graphs)?;
    Ok(out.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// Cross-connected layer: target `m` receives `Σ_k F_{k→m}(H_k)` with the
/// graphs of source mode `k`.
pub fn rct_forward(layer: &MgcLayer, inputs: &[Matrix], graphs: &[[Arc<Matrix>; N_GRAPHS]]) -> Result<Vec<Matrix>> {
    if !layer.is_cross() {
        return Err(Error::validation("rct_forward needs a cross-connected layer"));
    }
    layer_forward(layer, inputs, graphs)
}

pub fn check_zone_order(graphs: &GraphSet, set: &SampleSet) -> Result<()> {
    if graphs.zone_ids != set.zones() {
        return Err(Error::validation("zone order of graphs and samples differ"));
    }
    if graphs.n_modes() != set.n_modes() {
        return Err(Error::validation(format!(
            "graphs cover {} modes, samples {}",
            graphs.n_modes(),
            set.n_modes()
        )));
    }
    Ok(())
}

/// Samples evaluated per forward pass during prediction.
const PREDICT_CHUNK: usize = 64;

/// Raw-count predictions for every sample, per mode `(samples * zones) x 1`.
/// Values are not clipped.
pub fn network_forward(net: &MgcNetwork, graphs: &GraphSet, set: &SampleSet) -> Result<Vec<Matrix>> {
    check_zone_order(graphs, set)?;
    if net.n_modes() != set.n_modes() {
        return Err(Error::validation("network and samples have different mode counts"));
    }
    let per_mode: Vec<_> = (0..net.n_modes()).map(|m| graphs.normalized(m)).collect();
    let scaling = &set.normalization().labels;
    let mut out: Vec<Vec<f64>> = vec![Vec::with_capacity(set.len() * set.n_zones()); net.n_modes()];
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut tape = Tape::new();
    for chunk in idx.chunks(PREDICT_CHUNK) {
        tape.clear();
        let (x, _) = set.gather(chunk);
        let vars: Vec<Var> = net.params().into_iter().map(|p| tape.constant(p.clone())).collect();
        let inputs: Vec<Var> = x.into_iter().map(|m| tape.constant(m)).collect();
        let preds = net.forward_counts(&mut tape, &vars, &inputs, &per_mode, scaling)?;
        for (m, p) in preds.into_iter().enumerate() {
            out[m].extend_from_slice(tape.value(p).data());
        }
    }
    out.into_iter()
        .map(|d| {
            let rows = d.len();
            Matrix::new(rows, 1, d)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(n: usize) -> Arc<Matrix> {
        Arc::new(Matrix::identity(n))
    }

    #[test]
    fn identity_graphs_and_weights_quadruple_input() {
        let h = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0], [4.0, 0.0]]);
        let w = Matrix::concat_rows(&[&Matrix::identity(2); 4]).unwrap();
        let g = [eye(3), eye(3), eye(3), eye(3)];
        let out = mgc_forward(&h, &g, &w, &Matrix::zeros(1, 2), Activation::Identity).unwrap();
        assert_eq!(out, h.scale(4.0));
    }

    #[test]
    fn zero_input_gives_activated_bias() {
        let g = [eye(3), eye(3), eye(3), eye(3)];
        let w = Matrix::filled(8, 2, 0.7);
        let b = Matrix::from_rows(&[[-1.0, 2.0]]);
        let out = mgc_forward(&Matrix::zeros(3, 2), &g, &w, &b, Activation::Relu).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), &[0.0, 2.0]);
        }
    }

    #[test]
    fn variant_layer_tags() {
        use Sharing::*;
        assert_eq!(Variant::Mix.sharing(4), vec![Rct, Rct, Mlr, Mlr]);
        assert_eq!(Variant::Mgc.sharing(2), vec![None, None]);
        assert_eq!("mlr".parse::<Variant>().unwrap(), Variant::Mlr);
        assert!("xgb".parse::<Variant>().is_err());
    }

    #[test]
    fn cross_layers_carry_square_weight_sets() {
        let cfg = NetworkConfig::default();
        let net = MgcNetwork::new(Variant::Mix, 3, 4, &cfg, 1).unwrap();
        let counts: Vec<usize> = net.layers.iter().map(|l| l.weights.len()).collect();
        assert_eq!(counts, vec![9, 9, 3, 3]);
        assert_eq!(net.layers[0].weights[0].shape(), (16, 128));
        assert_eq!(net.layers[1].weights[0].shape(), (512, 256));
        assert_eq!(net.layers[3].activation, Activation::Identity);
        net.validate().unwrap();
        assert_eq!(net.param_names().len(), net.params().len());
    }

    #[test]
    fn missing_cross_weights_are_reported() {
        let cfg = NetworkConfig {
            layer_sizes: vec![1],
            ..Default::default()
        };
        let mut net = MgcNetwork::new(Variant::Rct, 2, 1, &cfg, 0).unwrap();
        net.layers[0].weights.truncate(2);
        let g = vec![[eye(2), eye(2), eye(2), eye(2)]; 2];
        let h = vec![Matrix::zeros(2, 1); 2];
        let err = rct_forward(&net.layers[0], &h, &g).unwrap_err();
        assert!(err.to_string().contains("cross-task"), "{err}");
    }
}
