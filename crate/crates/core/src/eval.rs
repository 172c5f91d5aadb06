//! Error metrics and report files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{SampleSet, TIMESTAMP_FORMAT};
use crate::error::{Error, Result};
use crate::graphs::csv_err;
use crate::numcore::Matrix;

fn check_lengths(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::validation(format!(
            "prediction and truth lengths differ ({} vs {})",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::validation("metrics need at least one record"));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// Mean relative error over records with positive truth, as a fraction.
/// `None` when no record has positive truth.
pub fn mape(pred: &[f64], truth: &[f64]) -> Result<Option<f64>> {
    check_lengths(pred, truth)?;
    let (mut s, mut n) = (0.0, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        if *t > 0.0 {
            s += (p - t).abs() / t;
            n += 1;
        }
    }
    Ok((n > 0).then(|| s / n as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    pub mape: Option<f64>,
}

impl Metrics {
    pub fn compute(pred: &[f64], truth: &[f64]) -> Result<Self> {
        Ok(Metrics {
            rmse: rmse(pred, truth)?,
            mae: mae(pred, truth)?,
            mape: mape(pred, truth)?,
        })
    }
}

/// Negative predictions set to zero.
pub fn clip_nonnegative(preds: &[Matrix]) -> Vec<Matrix> {
    preds.iter().map(|m| m.map(|v| v.max(0.0))).collect()
}

/// Per-mode metrics of clipped predictions against the set's labels.
pub fn evaluate(preds: &[Matrix], set: &SampleSet) -> Result<Vec<Metrics>> {
    if preds.len() != set.n_modes() {
        return Err(Error::validation("one prediction block per mode required"));
    }
    clip_nonnegative(preds)
        .iter()
        .enumerate()
        .map(|(m, p)| Metrics::compute(p.data(), set.labels(m).data()))
        .collect()
}

/// RMSE over every record of every mode, after clipping.
pub fn pooled_rmse(preds: &[Matrix], set: &SampleSet) -> Result<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for (m, p) in preds.iter().enumerate() {
        let truth = set.labels(m).data();
        check_lengths(p.data(), truth)?;
        for (p, t) in p.data().iter().zip(truth) {
            s += (p.max(0.0) - t).powi(2);
            n += 1;
        }
    }
    Ok((s / n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub mode: String,
    pub rmse: f64,
    pub mae: f64,
    pub mape: Option<f64>,
}

const METRIC_HEADER: [&str; 5] = ["model", "mode", "rmse", "mae", "mape"];
const PREDICTION_HEADER: [&str; 5] = ["timestamp", "zone", "mode", "truth", "pred"];

pub fn metric_rows(model: &str, modes: &[String], metrics: &[Metrics]) -> Vec<MetricRow> {
    modes
        .iter()
        .zip(metrics)
        .map(|(mode, m)| MetricRow {
            model: model.to_string(),
            mode: mode.clone(),
            rmse: m.rmse,
            mae: m.mae,
            mape: m.mape,
        })
        .collect()
}

/// Writes the metric table, grouped by mode so each mode forms one
/// section of model rows.
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut modes: Vec<&str> = Vec::new();
    for r in rows {
        if !modes.contains(&r.mode.as_str()) {
            modes.push(&r.mode);
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(METRIC_HEADER).map_err(|e| csv_err(path, e))?;
    for mode in modes {
        for r in rows.iter().filter(|r| r.mode == mode) {
            let mape = r.mape.map_or_else(|| "NA".to_string(), |v| v.to_string());
            w.write_record([r.model.clone(), r.mode.clone(), r.rmse.to_string(), r.mae.to_string(), mape])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().ne(METRIC_HEADER) {
        return Err(Error::format(path, format!("header must be {}", METRIC_HEADER.join(","))));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format(path, format!("bad number {s:?}")));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        out.push(MetricRow {
            model: rec[0].to_string(),
            mode: rec[1].to_string(),
            rmse: num(&rec[2])?,
            mae: num(&rec[3])?,
            mape: if &rec[4] == "NA" { None } else { Some(num(&rec[4])?) },
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub timestamp: String,
    pub zone: String,
    pub mode: String,
    pub truth: f64,
    pub pred: f64,
}

/// Clipped predictions next to the truth, ordered by time, zone, mode.
pub fn prediction_records(preds: &[Matrix], set: &SampleSet) -> Vec<PredictionRecord> {
    let n = set.n_zones();
    let mut out = Vec::with_capacity(set.len() * n * set.n_modes());
    for (s, t) in set.times().iter().enumerate() {
        let ts = t.format(TIMESTAMP_FORMAT).to_string();
        for z in 0..n {
            for m in 0..set.n_modes() {
                out.push(PredictionRecord {
                    timestamp: ts.clone(),
                    zone: set.zones()[z].clone(),
                    mode: set.modes()[m].clone(),
                    truth: set.label(s, z, m),
                    pred: preds[m].get(s * n + z, 0).max(0.0),
                });
            }
        }
    }
    out
}

pub fn write_predictions_csv(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(PREDICTION_HEADER).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record([
            r.timestamp.as_str(),
            r.zone.as_str(),
            r.mode.as_str(),
            &r.truth.to_string(),
            &r.pred.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().ne(PREDICTION_HEADER) {
        return Err(Error::format(path, format!("header must be {}", PREDICTION_HEADER.join(","))));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format(path, format!("bad number {s:?}")));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        out.push(PredictionRecord {
            timestamp: rec[0].to_string(),
            zone: rec[1].to_string(),
            mode: rec[2].to_string(),
            truth: num(&rec[3])?,
            pred: num(&rec[4])?,
        });
    }
    Ok(out)
}

/// Per-mode metrics recomputed from prediction records, in order of first
/// appearance of each mode.
pub fn metrics_from_records(records: &[PredictionRecord]) -> Result<Vec<(String, Metrics)>> {
    let mut modes: Vec<&str> = Vec::new();
    for r in records {
        if !modes.contains(&r.mode.as_str()) {
            modes.push(&r.mode);
        }
    }
    modes
        .into_iter()
        .map(|mode| {
            let (p, t): (Vec<f64>, Vec<f64>) = records
                .iter()
                .filter(|r| r.mode == mode)
                .map(|r| (r.pred, r.truth))
                .unzip();
            Ok((mode.to_string(), Metrics::compute(&p, &t)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert!((mae(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 3.5).abs() < 1e-12);
        assert!((mape(&[2.0, 4.0], &[0.0, 5.0]).unwrap().unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(mape(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), None);
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mae(&[], &[]).is_err());
    }

    #[test]
    fn metric_table_round_trip_with_sentinel() {
        let rows = vec![
            MetricRow {
                model: "HA".into(),
                mode: "solo".into(),
                rmse: 1.5,
                mae: 1.0,
                mape: None,
            },
            MetricRow {
                model: "HA".into(),
                mode: "shared".into(),
                rmse: 0.1 + 0.2,
                mae: 1.0 / 3.0,
                mape: Some(0.216),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics_csv(&p, &rows).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().contains(",NA\n"));
        assert_eq!(read_metrics_csv(&p).unwrap(), rows);
    }
}
