use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mtmgc_core::baselines::MlpConfig;
use mtmgc_core::dataset::{mode_names, Split, SynthConfig, TripColumns};
use mtmgc_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Everything a pipeline run can be configured with. Every section is
/// optional; missing keys take their defaults and unknown keys are fatal.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Mode labels in tensor order. Required for `ingest`; `synth` renames
    /// its modes to these when given.
    pub modes: Option<Vec<String>>,
    /// Seed of the synthetic generator. `--seed` overrides it together with
    /// `train.seed`.
    pub seed: u64,
    pub paths: Paths,
    pub ingest: IngestConfig,
    pub split: Split,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub baselines: BaselineConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Trip files, aggregated in order.
    pub trips: Vec<PathBuf>,
    /// `zone_id,centroid_lng,centroid_lat,<attr>...`
    pub zones: Option<PathBuf>,
    /// `zone_id_a,zone_id_b`
    pub adjacency: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    /// First hour of the tensor.
    pub start: String,
    pub n_hours: usize,
    pub columns: TripColumns,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            start: "2018-01-01T00:00:00".into(),
            n_hours: 8760,
            columns: TripColumns::default(),
        }
    }
}

/// Reference models fitted by `evaluate` next to the stored checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub historical_average: bool,
    pub lasso: bool,
    /// Trained with the optimizer settings of the `train` section.
    pub mlp: bool,
    pub mlp_layers: MlpConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            historical_average: true,
            lasso: true,
            mlp: false,
            mlp_layers: MlpConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Config = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
            self.train.seed = s;
        }
        self
    }

    pub fn synth_modes(&self) -> Result<Vec<String>> {
        match &self.modes {
            None => Ok(mode_names(self.synth.n_modes)),
            Some(m) if m.len() == self.synth.n_modes => Ok(m.clone()),
            Some(m) => bail!(invalid(format!(
                "modes lists {} labels but synth.n_modes is {}",
                m.len(),
                self.synth.n_modes
            ))),
        }
    }
}

/// Configuration problems surface as validation errors (exit code 1).
pub fn invalid(msg: impl Into<String>) -> mtmgc_core::Error {
    mtmgc_core::Error::validation(msg)
}
