use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MgcLearner, TrainConfig};
use crate::dataset::{LabelScaling, Normalization};
use crate::error::{Error, Result};
use crate::graphs::GraphSet;
use crate::io;
use crate::model::{Activation, MgcNetwork, Sharing, Variant};
use crate::mtl::Covariances;
use crate::numcore::Matrix;

pub const CHECKPOINT_FORMAT: u32 = 1;
const COV_NAMES: [&str; 3] = ["input", "output", "mode"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: u32,
    pub variant: Variant,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub layer_sizes: Vec<usize>,
    pub layer_sharing: Vec<Sharing>,
    pub n_features: usize,
    pub modes: Vec<String>,
    pub zones: Vec<String>,
    /// Training configuration with penalty weights resolved; its `seed`
    /// drove initialization and shuffling.
    pub config: TrainConfig,
    pub best_epoch: usize,
    /// Content hashes of the inputs, keyed by role.
    pub data_hashes: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

/// A trained learner together with the statistics its inputs were
/// standardized with.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub learner: MgcLearner,
    pub normalization: Normalization,
}

fn file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.f64")
}

fn flatten_rows<'a, I: IntoIterator<Item = &'a [f64]>>(rows: I) -> Vec<f64> {
    rows.into_iter().flatten().copied().collect()
}

#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    dir: &Path,
    learner: &MgcLearner,
    config: &TrainConfig,
    normalization: &Normalization,
    modes: &[String],
    best_epoch: usize,
    data_hashes: BTreeMap<String, String>,
) -> Result<()> {
    io::ensure_dir(dir)?;
    let net = &learner.network;
    let mut tensors: Vec<(String, Matrix)> = Vec::new();
    for (i, (name, p)) in net.param_names().into_iter().zip(net.params()).enumerate() {
        tensors.push((format!("param.{i:03}.{name}"), p.clone()));
    }
    for (l, cov) in learner.covariances.iter().enumerate() {
        if let Some(cov) = cov {
            for (k, what) in COV_NAMES.iter().enumerate() {
                tensors.push((format!("cov.l{l}.{what}"), cov.sigma(k).clone()));
            }
        }
    }
    for (name, a) in learner.graphs.named_raw() {
        tensors.push((format!("graph.{name}"), a.clone()));
    }
    let n_zones = learner.graphs.n_zones();
    let n_modes = net.n_modes();
    let fm = flatten_rows(normalization.feature_mean.iter().flatten().map(|a| a.as_slice()));
    let fs = flatten_rows(normalization.feature_std.iter().flatten().map(|a| a.as_slice()));
    tensors.push(("norm.feature_mean".into(), Matrix::new(n_modes * n_zones, 4, fm)?));
    tensors.push(("norm.feature_std".into(), Matrix::new(n_modes * n_zones, 4, fs)?));
    let lm = flatten_rows(normalization.labels.mean.iter().map(Vec::as_slice));
    let ls = flatten_rows(normalization.labels.std.iter().map(Vec::as_slice));
    tensors.push(("norm.label_mean".into(), Matrix::new(n_modes, n_zones, lm)?));
    tensors.push(("norm.label_std".into(), Matrix::new(n_modes, n_zones, ls)?));

    let mut entries = Vec::with_capacity(tensors.len());
    for (name, m) in &tensors {
        let file = file_name(name);
        io::write_matrix(&dir.join(&file), m)?;
        entries.push(TensorEntry {
            name: name.clone(),
            file,
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT,
        variant: net.variant,
        hidden_activation: Activation::Relu,
        output_activation: Activation::Identity,
        layer_sizes: net.layer_sizes(),
        layer_sharing: net.layers.iter().map(|l| l.sharing).collect(),
        n_features: net.n_features,
        modes: modes.to_vec(),
        zones: learner.graphs.zone_ids.clone(),
        config: config.clone(),
        best_epoch,
        data_hashes,
        tensors: entries,
    };
    io::write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join("manifest.json");
    let manifest: CheckpointManifest = io::read_json(&mpath)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format(&mpath, format!("unsupported checkpoint format {}", manifest.format)));
    }
    let mut tensors: HashMap<String, Matrix> = HashMap::new();
    for e in &manifest.tensors {
        let m = io::read_matrix(&dir.join(&e.file), e.rows, e.cols, &e.name)?;
        tensors.insert(e.name.clone(), m);
    }
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::format(&mpath, format!("tensor {name} missing from manifest")))
    };
    let n_modes = manifest.modes.len();
    let n_zones = manifest.zones.len();
    let config = &manifest.config;
    if config.network.layer_sizes != manifest.layer_sizes || config.variant != manifest.variant {
        return Err(Error::format(&mpath, "layer sizes or variant disagree with the stored configuration"));
    }
    let mut network = MgcNetwork::new(manifest.variant, n_modes, manifest.n_features, &config.network, config.seed)?;
    let names = network.param_names();
    for (i, (name, p)) in names.iter().zip(network.params_mut()).enumerate() {
        let stored = take(&format!("param.{i:03}.{name}"))?;
        if stored.shape() != p.shape() {
            return Err(Error::format(&mpath, format!("parameter {name} has shape {:?}, expected {:?}", stored.shape(), p.shape())));
        }
        *p = stored;
    }
    let mut covariances = Vec::with_capacity(network.layers.len());
    for (l, layer) in network.layers.iter().enumerate() {
        if layer.sharing == Sharing::Mlr {
            let sig = [0, 1, 2].map(|k| take(&format!("cov.l{l}.{}", COV_NAMES[k])));
            let [a, b, c] = sig;
            covariances.push(Some(Covariances::new(
                l,
                [a?, b?, c?],
                config.flip_flop.fix_input,
                config.flip_flop.fix_output,
            )?));
        } else {
            covariances.push(None);
        }
    }
    let mut raw = HashMap::new();
    let mut graph_names = vec!["A_N".to_string(), "A_D".into(), "A_F".into()];
    graph_names.extend((0..n_modes).map(|m| format!("A_P.{m}")));
    for g in graph_names {
        raw.insert(g.clone(), take(&format!("graph.{g}"))?);
    }
    let graphs = GraphSet::from_named_raw(manifest.zones.clone(), raw, n_modes)?;

    let fm = take("norm.feature_mean")?;
    let fs = take("norm.feature_std")?;
    let lm = take("norm.label_mean")?;
    let ls = take("norm.label_std")?;
    let per_zone = |m: &Matrix| -> Vec<Vec<[f64; 4]>> {
        (0..n_modes)
            .map(|mode| {
                (0..n_zones)
                    .map(|z| {
                        let r = m.row(mode * n_zones + z);
                        [r[0], r[1], r[2], r[3]]
                    })
                    .collect()
            })
            .collect()
    };
    let rows = |m: &Matrix| -> Vec<Vec<f64>> { (0..n_modes).map(|i| m.row(i).to_vec()).collect() };
    if fm.shape() != (n_modes * n_zones, 4) || lm.shape() != (n_modes, n_zones) {
        return Err(Error::format(&mpath, "normalization tensors do not match the zone and mode counts"));
    }
    let normalization = Normalization {
        feature_mean: per_zone(&fm),
        feature_std: per_zone(&fs),
        labels: LabelScaling {
            mean: rows(&lm),
            std: rows(&ls),
        },
    };
    let frozen = config.freeze_inter_weights.then(|| network.inter_mask());
    let learner = MgcLearner::from_parts(
        network,
        covariances,
        graphs,
        config.penalties()?,
        config.update_covariances.then(|| config.flip_flop.clone()),
        frozen,
    )?;
    Ok(Checkpoint {
        manifest,
        learner,
        normalization,
    })
}
