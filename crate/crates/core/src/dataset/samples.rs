use std::sync::Arc;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::{DemandTensor, TIMESTAMP_FORMAT};
use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Offsets (in hours, before the label hour `t+1`) of the four lag
/// features: `t-1`, `t`, `t+1-24` and `t+1-24*7`.
pub const LAG_OFFSETS: [usize; 4] = [2, 1, 24, 168];
/// Hours of history needed before the first label.
pub const WARMUP_HOURS: usize = 168;

/// Inclusive range of calendar days.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DateRange {
    pub from: NaiveDate,
    pub to: NaiveDate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Split {
    /// Label hours grouped by calendar day.
    Dates {
        train: DateRange,
        validation: DateRange,
        test: DateRange,
    },
    /// Chronological fractions of the feasible label hours; the test split
    /// takes the remainder.
    Fractions { train: f64, validation: f64 },
}

impl Default for Split {
    fn default() -> Self {
        Split::Fractions {
            train: 0.7,
            validation: 0.15,
        }
    }
}

/// Per-(mode, zone) affine map from network output to raw counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScaling {
    /// `[mode][zone]`
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

impl LabelScaling {
    pub fn identity(n_modes: usize, n_zones: usize) -> Self {
        LabelScaling {
            mean: vec![vec![0.0; n_zones]; n_modes],
            std: vec![vec![1.0; n_zones]; n_modes],
        }
    }
}

/// Standardization statistics, all computed on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// `[mode][zone][lag]`
    pub feature_mean: Vec<Vec<[f64; 4]>>,
    pub feature_std: Vec<Vec<[f64; 4]>>,
    pub labels: LabelScaling,
}

/// Features and labels for a set of label hours.
#[derive(Clone, Debug)]
pub struct SampleSet {
    n_zones: usize,
    hours: Vec<usize>,
    times: Vec<NaiveDateTime>,
    /// Per mode, `(samples * zones) x 4`, sample-major row blocks.
    features: Vec<Matrix>,
    /// Per mode, `(samples * zones) x 1`, raw counts.
    labels: Vec<Matrix>,
    zones: Arc<Vec<String>>,
    modes: Arc<Vec<String>>,
    normalization: Arc<Normalization>,
}

#[derive(Clone, Debug)]
pub struct Samples {
    pub train: SampleSet,
    pub validation: SampleSet,
    pub test: SampleSet,
}

impl Samples {
    /// Hours of the demand tensor visible to training: everything up to and
    /// including the last training label.
    pub fn train_window(&self) -> std::ops::Range<usize> {
        0..self.train.hours.last().map_or(0, |h| h + 1)
    }
}

fn std_or_one(var: f64) -> f64 {
    if var > 1e-24 {
        var.sqrt()
    } else {
        1.0
    }
}

fn label_hours_for(demand: &DemandTensor, range: &DateRange, name: &str) -> Result<Vec<usize>> {
    if range.from > range.to {
        return Err(Error::validation(format!("{name} range ends before it starts")));
    }
    let first = range.from.and_hms_opt(0, 0, 0).expect("midnight");
    let last = range.to.and_hms_opt(23, 0, 0).expect("23:00");
    let (Some(a), Some(b)) = (demand.hour_index(first), demand.hour_index(last)) else {
        return Err(Error::validation(format!(
            "{name} range {}..={} is not covered by demand starting {} with {} hours",
            range.from,
            range.to,
            demand.start(),
            demand.n_hours()
        )));
    };
    Ok((a..=b).collect())
}

fn compute_normalization(demand: &DemandTensor, train_hours: &[usize]) -> Normalization {
    let (nm, nz) = (demand.n_modes(), demand.n_zones());
    let n = train_hours.len() as f64;
    let mut feature_mean = vec![vec![[0.0; 4]; nz]; nm];
    let mut feature_std = vec![vec![[1.0; 4]; nz]; nm];
    let mut labels = LabelScaling::identity(nm, nz);
    for m in 0..nm {
        for z in 0..nz {
            let series = demand.series(z, m);
            for (j, &lag) in LAG_OFFSETS.iter().enumerate() {
                let mean = train_hours.iter().map(|&h| series[h - lag]).sum::<f64>() / n;
                let var = train_hours.iter().map(|&h| (series[h - lag] - mean).powi(2)).sum::<f64>() / n;
                feature_mean[m][z][j] = mean;
                feature_std[m][z][j] = std_or_one(var);
            }
            let mean = train_hours.iter().map(|&h| series[h]).sum::<f64>() / n;
            let var = train_hours.iter().map(|&h| (series[h] - mean).powi(2)).sum::<f64>() / n;
            labels.mean[m][z] = mean;
            labels.std[m][z] = std_or_one(var);
        }
    }
    Normalization {
        feature_mean,
        feature_std,
        labels,
    }
}

impl SampleSet {
    /// Builds samples for the given label hours with precomputed statistics.
    pub fn build(demand: &DemandTensor, hours: Vec<usize>, normalization: Arc<Normalization>) -> Result<Self> {
        if let Some(&h) = hours.iter().find(|&&h| h < WARMUP_HOURS || h >= demand.n_hours()) {
            return Err(Error::validation(format!(
                "label hour {} ({}) needs {WARMUP_HOURS} hours of history inside the demand axis; first feasible label hour is {}",
                h,
                demand.hour_time(h).format(TIMESTAMP_FORMAT),
                demand.hour_time(WARMUP_HOURS).format(TIMESTAMP_FORMAT)
            )));
        }
        let (nm, nz) = (demand.n_modes(), demand.n_zones());
        let s = hours.len();
        let mut features = Vec::with_capacity(nm);
        let mut labels = Vec::with_capacity(nm);
        for m in 0..nm {
            let mut f = Vec::with_capacity(s * nz * 4);
            let mut y = Vec::with_capacity(s * nz);
            for &h in &hours {
                for z in 0..nz {
                    let series = demand.series(z, m);
                    for (j, &lag) in LAG_OFFSETS.iter().enumerate() {
                        let mu = normalization.feature_mean[m][z][j];
                        let sd = normalization.feature_std[m][z][j];
                        f.push((series[h - lag] - mu) / sd);
                    }
                    y.push(series[h]);
                }
            }
            features.push(Matrix::new(s * nz, 4, f)?);
            labels.push(Matrix::new(s * nz, 1, y)?);
        }
        Ok(SampleSet {
            n_zones: nz,
            times: hours.iter().map(|&h| demand.hour_time(h)).collect(),
            hours,
            features,
            labels,
            zones: Arc::new(demand.zones().to_vec()),
            modes: Arc::new(demand.modes().to_vec()),
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.hours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hours.is_empty()
    }

    pub fn n_zones(&self) -> usize {
        self.n_zones
    }

    pub fn n_modes(&self) -> usize {
        self.features.len()
    }

    /// Label-hour indices on the demand axis.
    pub fn hours(&self) -> &[usize] {
        &self.hours
    }

    pub fn times(&self) -> &[NaiveDateTime] {
        &self.times
    }

    pub fn zones(&self) -> &[String] {
        &self.zones
    }

    pub fn modes(&self) -> &[String] {
        &self.modes
    }

    pub fn normalization(&self) -> &Arc<Normalization> {
        &self.normalization
    }

    /// All standardized features of `mode`, `(samples * zones) x 4`.
    pub fn features(&self, mode: usize) -> &Matrix {
        &self.features[mode]
    }

    /// All raw labels of `mode`, `(samples * zones) x 1`.
    pub fn labels(&self, mode: usize) -> &Matrix {
        &self.labels[mode]
    }

    /// Feature matrix of one sample and mode, `zones x 4`.
    pub fn sample_features(&self, sample: usize, mode: usize) -> Matrix {
        self.features[mode].row_block(sample * self.n_zones, self.n_zones)
    }

    pub fn label(&self, sample: usize, zone: usize, mode: usize) -> f64 {
        self.labels[mode].get(sample * self.n_zones + zone, 0)
    }

    /// Stacks the given samples into per-mode feature and label blocks.
    pub fn gather(&self, samples: &[usize]) -> (Vec<Matrix>, Vec<Matrix>) {
        let n = self.n_zones;
        let pick = |m: &Matrix| {
            let mut data = Vec::with_capacity(samples.len() * n * m.cols());
            for &s in samples {
                data.extend_from_slice(&m.data()[s * n * m.cols()..(s + 1) * n * m.cols()]);
            }
            Matrix::new(samples.len() * n, m.cols(), data).expect("consistent block sizes")
        };
        (
            self.features.iter().map(pick).collect(),
            self.labels.iter().map(pick).collect(),
        )
    }

    /// Copy with zones reordered (`perm[new] = old`).
    pub fn permute_zones(&self, perm: &[usize]) -> SampleSet {
        let n = self.n_zones;
        let s = self.len();
        let rows: Vec<usize> = (0..s).flat_map(|k| perm.iter().map(move |&p| k * n + p)).collect();
        let norm = &self.normalization;
        let normalization = Normalization {
            feature_mean: norm.feature_mean.iter().map(|v| perm.iter().map(|&p| v[p]).collect()).collect(),
            feature_std: norm.feature_std.iter().map(|v| perm.iter().map(|&p| v[p]).collect()).collect(),
            labels: LabelScaling {
                mean: norm.labels.mean.iter().map(|v| perm.iter().map(|&p| v[p]).collect()).collect(),
                std: norm.labels.std.iter().map(|v| perm.iter().map(|&p| v[p]).collect()).collect(),
            },
        };
        SampleSet {
            features: self.features.iter().map(|m| m.permute_rows(&rows)).collect(),
            labels: self.labels.iter().map(|m| m.permute_rows(&rows)).collect(),
            zones: Arc::new(perm.iter().map(|&p| self.zones[p].clone()).collect()),
            normalization: Arc::new(normalization),
            ..self.clone()
        }
    }
}

/// Splits the label hours of `demand`, fits the standardization on the
/// training split and builds the three sample sets.
pub fn make_samples(demand: &DemandTensor, split: &Split) -> Result<Samples> {
    let (train, validation, test) = match split {
        Split::Dates {
            train,
            validation,
            test,
        } => (
            label_hours_for(demand, train, "train")?,
            label_hours_for(demand, validation, "validation")?,
            label_hours_for(demand, test, "test")?,
        ),
        Split::Fractions {
            train,
            validation,
        } => {
            if !(*train > 0.0 && *validation > 0.0 && train + validation < 1.0) {
                return Err(Error::validation(format!(
                    "split fractions must be positive and leave room for a test split, got {train}/{validation}"
                )));
            }
            if demand.n_hours() <= WARMUP_HOURS {
                return Err(Error::validation(format!(
                    "demand has {} hours; first feasible label hour is {}",
                    demand.n_hours(),
                    demand.hour_time(WARMUP_HOURS).format(TIMESTAMP_FORMAT)
                )));
            }
            let feasible = demand.n_hours() - WARMUP_HOURS;
            let n_train = (feasible as f64 * train).floor() as usize;
            let n_val = (feasible as f64 * validation).floor() as usize;
            let a = WARMUP_HOURS;
            (
                (a..a + n_train).collect(),
                (a + n_train..a + n_train + n_val).collect(),
                (a + n_train + n_val..demand.n_hours()).collect::<Vec<_>>(),
            )
        }
    };
    for (name, hours) in [("train", &train), ("validation", &validation), ("test", &test)] {
        if hours.is_empty() {
            return Err(Error::validation(format!("{name} split is empty")));
        }
    }
    if let Some(&h) = train.iter().find(|&&h| h < WARMUP_HOURS) {
        return Err(Error::validation(format!(
            "insufficient warm-up for label {}; first feasible label hour is {}",
            demand.hour_time(h).format(TIMESTAMP_FORMAT),
            demand.hour_time(WARMUP_HOURS).format(TIMESTAMP_FORMAT)
        )));
    }
    let max_train = *train.iter().max().expect("non-empty");
    let min_eval = validation.iter().chain(&test).min().copied().expect("non-empty");
    if min_eval <= max_train {
        return Err(Error::validation("validation and test label hours must come after all training hours"));
    }
    let normalization = Arc::new(compute_normalization(demand, &train));
    Ok(Samples {
        train: SampleSet::build(demand, train, normalization.clone())?,
        validation: SampleSet::build(demand, validation, normalization.clone())?,
        test: SampleSet::build(demand, test, normalization)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::parse_timestamp;

    fn ramp(n_hours: usize) -> DemandTensor {
        // zone z, mode m, hour h has count 1000*m + 10*z + h, so every value
        // encodes its own hour
        let zones = vec!["a".to_string(), "b".to_string()];
        let modes = vec!["solo".to_string(), "shared".to_string()];
        let mut counts = Vec::new();
        for m in 0..2 {
            for z in 0..2 {
                for h in 0..n_hours {
                    counts.push((100_000 * m + 10_000 * z + h) as f64);
                }
            }
        }
        DemandTensor::new(zones, modes, parse_timestamp("2018-01-01T00:00:00").unwrap(), n_hours, counts).unwrap()
    }

    #[test]
    fn lags_pick_the_expected_time_columns() {
        let d = ramp(400);
        let hours = vec![200, 399];
        let norm = Arc::new(Normalization {
            feature_mean: vec![vec![[0.0; 4]; 2]; 2],
            feature_std: vec![vec![[1.0; 4]; 2]; 2],
            labels: LabelScaling::identity(2, 2),
        });
        let s = SampleSet::build(&d, hours.clone(), norm).unwrap();
        for (k, &label_hour) in hours.iter().enumerate() {
            let t = label_hour - 1;
            // (t-1, t, t-23, t-167)
            let expect_hours = [t - 1, t, t - 23, t - 167];
            for m in 0..2 {
                for z in 0..2 {
                    let base = (100_000 * m + 10_000 * z) as f64;
                    let f = s.sample_features(k, m);
                    for (j, &eh) in expect_hours.iter().enumerate() {
                        assert_eq!(f.get(z, j) - base, eh as f64);
                        assert!(f.get(z, j) - base < label_hour as f64);
                    }
                    assert_eq!(s.label(k, z, m) - base, label_hour as f64);
                }
            }
        }
    }

    #[test]
    fn constant_series_standardize_to_zero() {
        let zones = vec!["a".to_string()];
        let d = DemandTensor::new(
            zones,
            vec!["solo".into()],
            parse_timestamp("2018-01-01T00:00:00").unwrap(),
            400,
            vec![7.0; 400],
        )
        .unwrap();
        let s = make_samples(&d, &Split::default()).unwrap();
        assert!(s.train.features(0).data().iter().all(|&v| v == 0.0));
        assert!(s.test.features(0).data().iter().all(|&v| v == 0.0));
        assert_eq!(s.train.normalization().labels.std[0][0], 1.0);
    }

    #[test]
    fn insufficient_warmup_names_first_feasible_hour() {
        let d = ramp(400);
        let split = Split::Dates {
            train: DateRange {
                from: NaiveDate::from_ymd_opt(2018, 1, 2).unwrap(),
                to: NaiveDate::from_ymd_opt(2018, 1, 9).unwrap(),
            },
            validation: DateRange {
                from: NaiveDate::from_ymd_opt(2018, 1, 10).unwrap(),
                to: NaiveDate::from_ymd_opt(2018, 1, 10).unwrap(),
            },
            test: DateRange {
                from: NaiveDate::from_ymd_opt(2018, 1, 11).unwrap(),
                to: NaiveDate::from_ymd_opt(2018, 1, 11).unwrap(),
            },
        };
        let err = make_samples(&d, &split).unwrap_err().to_string();
        assert!(err.contains("2018-01-08T00:00:00"), "{err}");
    }

    #[test]
    fn train_statistics_center_train_features() {
        let d = ramp(600);
        let s = make_samples(&d, &Split::default()).unwrap();
        let n = s.train.n_zones();
        for m in 0..2 {
            let f = s.train.features(m);
            for z in 0..n {
                for j in 0..4 {
                    let mean = (0..s.train.len()).map(|k| f.get(k * n + z, j)).sum::<f64>() / s.train.len() as f64;
                    assert!(mean.abs() < 1e-9);
                }
            }
        }
        assert!(s.train_window().end <= s.validation.hours()[0]);
    }
}
