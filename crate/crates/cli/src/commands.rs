use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use mtmgc_core::baselines::{fit_lasso, fit_mlp, ha_predict_set};
use mtmgc_core::dataset::{aggregate, make_samples, parse_timestamp, read_trips, synthesize, DemandTensor, IngestReport, SampleSet, Samples};
use mtmgc_core::eval::{self, metric_rows, prediction_records, write_metrics_csv, write_predictions_csv, MetricRow};
use mtmgc_core::graphs::{GraphSet, ZoneTable};
use mtmgc_core::io::{ensure_dir, write_json};
use mtmgc_core::model::Variant;
use mtmgc_core::train::{fit, load_checkpoint, save_checkpoint, write_train_log, Checkpoint, FitOptions, Learner};
use mtmgc_core::Matrix;
use serde::Serialize;
use serde_json::json;

use crate::config::{invalid, Config};
use crate::hashing::{content_hash, RUN_RECORD};

/// Directory layout below `--out`.
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout { root: root.to_path_buf() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn demand(&self) -> PathBuf {
        self.data().join("demand")
    }

    pub fn zones(&self) -> PathBuf {
        self.data().join("zones.csv")
    }

    pub fn adjacency(&self) -> PathBuf {
        self.data().join("adjacency.csv")
    }

    pub fn graphs(&self) -> PathBuf {
        self.root.join("graphs")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions")
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a Config,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    summary: serde_json::Value,
}

fn hashes<'a>(items: impl IntoIterator<Item = (&'a str, PathBuf)>) -> Result<BTreeMap<String, String>> {
    items
        .into_iter()
        .map(|(role, p)| Ok((role.to_string(), content_hash(&p)?)))
        .collect()
}

fn write_run(
    dir: &Path,
    command: &str,
    cfg: &Config,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    summary: serde_json::Value,
) -> Result<()> {
    let seed = if command == "synth" { cfg.seed } else { cfg.train.seed };
    let record = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config: cfg,
        inputs,
        outputs,
        summary,
    };
    write_json(&dir.join(RUN_RECORD), &record)?;
    Ok(())
}

fn load_demand(layout: &Layout) -> Result<DemandTensor> {
    DemandTensor::load(&layout.demand())
        .with_context(|| format!("no demand tensor under {}; run `ingest` or `synth` first", layout.data().display()))
}

pub fn synth(cfg: &Config, layout: &Layout) -> Result<()> {
    let modes = cfg.synth_modes()?;
    let syn = synthesize(&cfg.synth, cfg.seed)?;
    let rename = |d: &DemandTensor| -> Result<DemandTensor> {
        let counts = (0..d.n_modes()).flat_map(|m| d.mode_slice(m).iter().copied()).collect();
        Ok(DemandTensor::new(d.zones().to_vec(), modes.clone(), d.start(), d.n_hours(), counts)?)
    };
    let demand = rename(&syn.demand)?;
    let data = layout.data();
    ensure_dir(&data)?;
    demand.save(&layout.demand())?;
    rename(&syn.intensity)?.save(&data.join("intensity"))?;
    syn.zones.save(&layout.zones(), &layout.adjacency())?;
    let outputs = hashes([("demand", layout.demand()), ("zones", layout.zones()), ("adjacency", layout.adjacency())])?;
    let summary = json!({
        "zones": demand.n_zones(),
        "hours": demand.n_hours(),
        "modes": demand.modes(),
        "trips": demand.total(),
    });
    write_run(&data, "synth", cfg, BTreeMap::new(), outputs, summary)?;
    eprintln!("synthesized {} zones x {} hours into {}", demand.n_zones(), demand.n_hours(), data.display());
    Ok(())
}

pub fn ingest(cfg: &Config, layout: &Layout) -> Result<()> {
    let modes = cfg.modes.clone().ok_or_else(|| invalid("ingest needs the `modes` list"))?;
    let zones_path = cfg.paths.zones.clone().ok_or_else(|| invalid("ingest needs paths.zones"))?;
    let adj_path = cfg.paths.adjacency.clone().ok_or_else(|| invalid("ingest needs paths.adjacency"))?;
    if cfg.paths.trips.is_empty() {
        bail!(invalid("ingest needs at least one file in paths.trips"));
    }
    let start = parse_timestamp(&cfg.ingest.start)
        .ok_or_else(|| invalid(format!("ingest.start {:?} is not a timestamp", cfg.ingest.start)))?;
    let zones = ZoneTable::load(&zones_path, &adj_path)?;
    let ids = zones.ids();
    let mut demand = DemandTensor::zeros(ids.clone(), modes.clone(), start, cfg.ingest.n_hours)?;
    let mut report = IngestReport::default();
    for path in &cfg.paths.trips {
        let (records, malformed) = read_trips(path, &cfg.ingest.columns)?;
        let (part, r) = aggregate(records, &ids, &modes, start, cfg.ingest.n_hours)?;
        demand.merge(&part)?;
        report.accepted += r.accepted;
        report.unknown_zone += r.unknown_zone;
        report.unknown_mode += r.unknown_mode;
        report.out_of_range += r.out_of_range;
        report.malformed += malformed;
        eprintln!("{}: {} trips accepted", path.display(), r.accepted);
    }
    let data = layout.data();
    ensure_dir(&data)?;
    demand.save(&layout.demand())?;
    zones.save(&layout.zones(), &layout.adjacency())?;
    write_json(&data.join("ingest_report.json"), &report)?;
    let mut inputs = hashes([("zones", zones_path), ("adjacency", adj_path)])?;
    for (i, p) in cfg.paths.trips.iter().enumerate() {
        inputs.insert(format!("trips.{i}"), content_hash(p)?);
    }
    let outputs = hashes([("demand", layout.demand())])?;
    write_run(&data, "ingest", cfg, inputs, outputs, serde_json::to_value(&report)?)?;
    Ok(())
}

pub fn build_graphs(cfg: &Config, layout: &Layout) -> Result<()> {
    let demand = load_demand(layout)?;
    let zones = ZoneTable::load(&layout.zones(), &layout.adjacency())?;
    let samples = make_samples(&demand, &cfg.split)?;
    let window = samples.train_window();
    let graphs = GraphSet::build(&zones, &demand, window.clone())?;
    let dir = layout.graphs();
    graphs.save(&dir)?;
    let inputs = hashes([("demand", layout.demand()), ("zones", layout.zones()), ("adjacency", layout.adjacency())])?;
    let outputs = hashes([("graphs", dir.clone())])?;
    let summary = json!({ "mobility_hours": [window.start, window.end] });
    write_run(&dir, "build-graphs", cfg, inputs, outputs, summary)?;
    eprintln!("graphs over {} zones written to {}", graphs.n_zones(), dir.display());
    Ok(())
}

pub fn train(cfg: &Config, layout: &Layout, variant: Option<Variant>, checkpoint: Option<PathBuf>) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(v) = variant {
        cfg.train.variant = v;
    }
    cfg.train = cfg.train.resolved()?;
    let demand = load_demand(layout)?;
    let graphs = GraphSet::load(&layout.graphs())
        .with_context(|| format!("no graphs under {}; run `build-graphs` first", layout.graphs().display()))?;
    if graphs.zone_ids != demand.zones() || graphs.n_modes() != demand.n_modes() {
        bail!(invalid("graphs were built for other zones or modes; rerun `build-graphs`"));
    }
    let samples = make_samples(&demand, &cfg.split)?;
    let variant = cfg.train.variant;
    eprintln!(
        "training {variant} on {} train / {} validation hours",
        samples.train.len(),
        samples.validation.len()
    );
    let run = fit(&samples.train, &samples.validation, &graphs, &cfg.train)?;
    let dir = checkpoint.unwrap_or_else(|| layout.checkpoints().join(variant.name()));
    let inputs = hashes([("demand", layout.demand()), ("graphs", layout.graphs())])?;
    save_checkpoint(
        &dir,
        &run.learner,
        &run.config,
        samples.train.normalization(),
        demand.modes(),
        run.report.best_epoch,
        inputs.clone(),
    )?;
    write_train_log(&dir.join("train_log.csv"), &run.report, demand.modes())?;
    let r = &run.report;
    let summary = json!({
        "best_epoch": r.best_epoch,
        "best_val_rmse": r.best_val_rmse,
        "stopped_early": r.stopped_early,
        "initial_train_loss": r.initial_train_loss,
        "final_train_loss": r.final_train_loss,
        "epochs": r.epochs,
    });
    let outputs = hashes([("checkpoint", dir.clone())])?;
    write_run(&dir, "train", &cfg, inputs, outputs, summary)?;
    eprintln!(
        "{variant}: best epoch {} of {}, validation RMSE {:.4}; checkpoint in {}",
        r.best_epoch,
        r.epochs.len(),
        r.best_val_rmse,
        dir.display()
    );
    Ok(())
}

fn model_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| "model".to_string(), |n| n.to_string_lossy().into_owned())
}

fn list_checkpoints(layout: &Layout) -> Result<Vec<PathBuf>> {
    let root = layout.checkpoints();
    if !root.is_dir() {
        return Ok(Vec::new());
    }
    let mut found: Vec<(usize, String, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(&root).with_context(|| format!("listing {}", root.display()))? {
        let path = entry?.path();
        if path.join("manifest.json").is_file() {
            let name = model_name(&path);
            let rank = Variant::ALL.iter().position(|v| v.name() == name).unwrap_or(Variant::ALL.len());
            found.push((rank, name, path));
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, _, p)| p).collect())
}

/// The chosen split rebuilt with the statistics stored in the checkpoint.
fn checkpoint_set(ck: &Checkpoint, demand: &DemandTensor, set: &SampleSet) -> Result<SampleSet> {
    if ck.manifest.zones != demand.zones() || ck.manifest.modes != demand.modes() {
        bail!(invalid("checkpoint was trained on other zones or modes"));
    }
    Ok(SampleSet::build(demand, set.hours().to_vec(), Arc::new(ck.normalization.clone()))?)
}

fn write_predictions(dir: &Path, name: &str, preds: &[Matrix], set: &SampleSet) -> Result<PathBuf> {
    let path = dir.join(format!("predictions_{name}.csv"));
    write_predictions_csv(&path, &prediction_records(preds, set))?;
    Ok(path)
}

fn write_sigma_mode(dir: &Path, name: &str, ck: &Checkpoint) -> Result<Vec<PathBuf>> {
    let modes = &ck.manifest.modes;
    let mut written = Vec::new();
    for (l, cov) in ck.learner.covariances.iter().enumerate() {
        let Some(cov) = cov else { continue };
        let sigma = cov.sigma(2);
        let mut text = format!("mode,{}\n", modes.join(","));
        for (i, m) in modes.iter().enumerate() {
            let row: Vec<String> = sigma.row(i).iter().map(f64::to_string).collect();
            text.push_str(&format!("{m},{}\n", row.join(",")));
        }
        let path = dir.join(format!("sigma_mode_{name}_layer{l}.csv"));
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

pub fn evaluate(cfg: &Config, layout: &Layout, checkpoints: Vec<PathBuf>) -> Result<()> {
    let demand = load_demand(layout)?;
    let samples = make_samples(&demand, &cfg.split)?;
    let Samples { train, validation, test } = &samples;
    let checkpoints = if checkpoints.is_empty() { list_checkpoints(layout)? } else { checkpoints };
    let b = &cfg.baselines;
    if checkpoints.is_empty() && !(b.historical_average || b.lasso || b.mlp) {
        bail!(invalid("nothing to evaluate: no checkpoints and every baseline disabled"));
    }
    let dir = layout.report();
    ensure_dir(&dir)?;
    let modes = demand.modes().to_vec();
    let mut rows: Vec<MetricRow> = Vec::new();
    let mut outputs = BTreeMap::new();
    let record = |name: &str, preds: &[Matrix], set: &SampleSet| -> Result<(Vec<MetricRow>, String)> {
        let p = write_predictions(&dir, name, preds, set)?;
        Ok((metric_rows(name, &modes, &eval::evaluate(preds, set)?), content_hash(&p)?))
    };
    let mut add = |name: &str, (r, hash): (Vec<MetricRow>, String)| {
        rows.extend(r);
        outputs.insert(format!("predictions.{name}"), hash);
    };
    if b.historical_average {
        add("HA", record("HA", &ha_predict_set(&demand, test)?, test)?);
    }
    if b.lasso {
        add("LASSO", record("LASSO", &fit_lasso(train, validation)?.predict(test)?, test)?);
    }
    if b.mlp {
        let (mlp, _) = fit_mlp(train, validation, &b.mlp_layers, &FitOptions::from(&cfg.train))?;
        add("MLP", record("MLP", &mlp.predict(test)?, test)?);
    }
    let mut inputs = hashes([("demand", layout.demand())])?;
    let mut sigma_hashes = BTreeMap::new();
    for path in &checkpoints {
        let name = model_name(path);
        let ck = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        let set = checkpoint_set(&ck, &demand, test)?;
        add(&name, record(&name, &ck.learner.predict(&set)?, &set)?);
        for p in write_sigma_mode(&dir, &name, &ck)? {
            sigma_hashes.insert(model_name(&p), content_hash(&p)?);
        }
        inputs.insert(format!("checkpoint.{name}"), content_hash(path)?);
    }
    outputs.extend(sigma_hashes);
    let metrics = dir.join("metrics.csv");
    write_metrics_csv(&metrics, &rows)?;
    outputs.insert("metrics".into(), content_hash(&metrics)?);
    for r in &rows {
        let mape = r.mape.map_or_else(|| "NA".into(), |v| format!("{v:.4}"));
        eprintln!("{:<8} {:<8} rmse {:>9.4}  mae {:>9.4}  mape {mape}", r.model, r.mode, r.rmse, r.mae);
    }
    write_run(&dir, "evaluate", cfg, inputs, outputs, serde_json::to_value(&rows)?)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum SplitChoice {
    Train,
    Validation,
    Test,
}

pub fn predict(cfg: &Config, layout: &Layout, checkpoint: &Path, split: SplitChoice) -> Result<()> {
    let demand = load_demand(layout)?;
    let samples = make_samples(&demand, &cfg.split)?;
    let base = match split {
        SplitChoice::Train => &samples.train,
        SplitChoice::Validation => &samples.validation,
        SplitChoice::Test => &samples.test,
    };
    let ck = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let set = checkpoint_set(&ck, &demand, base)?;
    let preds = ck.learner.predict(&set)?;
    let dir = layout.predictions();
    ensure_dir(&dir)?;
    let name = model_name(checkpoint);
    let path = write_predictions(&dir, &name, &preds, &set)?;
    let inputs = hashes([("demand", layout.demand()), ("checkpoint", checkpoint.to_path_buf())])?;
    let outputs = hashes([("predictions", path.clone())])?;
    write_run(&dir, "predict", cfg, inputs, outputs, json!({ "records": set.len() * set.n_zones() * set.n_modes() }))?;
    eprintln!("predictions written to {}", path.display());
    Ok(())
}
