//! Zone-hour demand tensors, trip ingestion, lag-feature samples and the
//! synthetic demand generator.

mod samples;
mod synth;
mod trips;

use std::path::Path;

use chrono::{Duration, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub use samples::{
    make_samples, DateRange, LabelScaling, Normalization, SampleSet, Samples, Split, LAG_OFFSETS, WARMUP_HOURS,
};
pub use synth::{mode_names, synthesize, SynthConfig, Synthetic};
pub use trips::{aggregate, read_trips, IngestReport, TripColumns, TripRecord};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Hourly demand counts over a contiguous time axis.
///
/// Counts are stored per mode, zone-major: the series of zone `z` for mode
/// `m` is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct DemandTensor {
    zones: Vec<String>,
    modes: Vec<String>,
    start: NaiveDateTime,
    n_hours: usize,
    counts: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemandManifest {
    zones: Vec<String>,
    modes: Vec<String>,
    start_hour: String,
    n_hours: usize,
    files: Vec<String>,
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    const FORMATS: [&str; 5] = [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M:%S%.f",
    ];
    let s = s.trim();
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

pub fn floor_to_hour(t: NaiveDateTime) -> NaiveDateTime {
    t.with_minute(0)
        .and_then(|t| t.with_second(0))
        .and_then(|t| t.with_nanosecond(0))
        .expect("zero minute/second are always valid")
}

impl DemandTensor {
    pub fn zeros(zones: Vec<String>, modes: Vec<String>, start: NaiveDateTime, n_hours: usize) -> Result<Self> {
        DemandTensor::new(zones.clone(), modes.clone(), start, n_hours, vec![0.0; zones.len() * modes.len() * n_hours])
    }

    pub fn new(
        zones: Vec<String>,
        modes: Vec<String>,
        start: NaiveDateTime,
        n_hours: usize,
        counts: Vec<f64>,
    ) -> Result<Self> {
        if floor_to_hour(start) != start {
            return Err(Error::validation(format!("start {start} is not on an hour boundary")));
        }
        if counts.len() != zones.len() * modes.len() * n_hours {
            return Err(Error::validation(format!(
                "demand needs {} counts, got {}",
                zones.len() * modes.len() * n_hours,
                counts.len()
            )));
        }
        if let Some(v) = counts.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::validation(format!("demand counts must be finite and nonnegative, found {v}")));
        }
        Ok(DemandTensor {
            zones,
            modes,
            start,
            n_hours,
            counts,
        })
    }

    pub fn zones(&self) -> &[String] {
        &self.zones
    }

    pub fn modes(&self) -> &[String] {
        &self.modes
    }

    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    pub fn n_zones(&self) -> usize {
        self.zones.len()
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn n_hours(&self) -> usize {
        self.n_hours
    }

    fn offset(&self, zone: usize, hour: usize, mode: usize) -> usize {
        (mode * self.zones.len() + zone) * self.n_hours + hour
    }

    pub fn count(&self, zone: usize, hour: usize, mode: usize) -> f64 {
        self.counts[self.offset(zone, hour, mode)]
    }

    pub(crate) fn add_count(&mut self, zone: usize, hour: usize, mode: usize, by: f64) {
        let o = self.offset(zone, hour, mode);
        self.counts[o] += by;
    }

    /// Hourly series of one zone and mode.
    pub fn series(&self, zone: usize, mode: usize) -> &[f64] {
        let o = self.offset(zone, 0, mode);
        &self.counts[o..o + self.n_hours]
    }

    /// Counts of one mode, zone-major.
    pub fn mode_slice(&self, mode: usize) -> &[f64] {
        let len = self.zones.len() * self.n_hours;
        &self.counts[mode * len..(mode + 1) * len]
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn hour_time(&self, hour: usize) -> NaiveDateTime {
        self.start + Duration::hours(hour as i64)
    }

    /// Index of the hour containing `t`, if inside the axis.
    pub fn hour_index(&self, t: NaiveDateTime) -> Option<usize> {
        let secs = (t - self.start).num_seconds();
        let h = secs.div_euclid(3600);
        (h >= 0 && (h as usize) < self.n_hours).then_some(h as usize)
    }

    /// Element-wise sum with a tensor over the same axes (shard merge).
    pub fn merge(&mut self, other: &DemandTensor) -> Result<()> {
        if self.zones != other.zones || self.modes != other.modes || self.start != other.start || self.n_hours != other.n_hours {
            return Err(Error::validation("cannot merge demand tensors over different axes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Copy with zones reordered (`perm[new] = old`).
    pub fn permute_zones(&self, perm: &[usize]) -> DemandTensor {
        let mut out = DemandTensor {
            zones: perm.iter().map(|&p| self.zones[p].clone()).collect(),
            ..self.clone()
        };
        for m in 0..self.n_modes() {
            for (new, &old) in perm.iter().enumerate() {
                let src = self.offset(old, 0, m);
                let dst = out.offset(new, 0, m);
                out.counts[dst..dst + self.n_hours].copy_from_slice(&self.counts[src..src + self.n_hours]);
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::ensure_dir(dir)?;
        let files: Vec<String> = (0..self.n_modes()).map(|m| format!("mode_{m}.f64")).collect();
        for (m, f) in files.iter().enumerate() {
            io::write_f64_le(&dir.join(f), self.mode_slice(m))?;
        }
        io::write_json(
            &dir.join("manifest.json"),
            &DemandManifest {
                zones: self.zones.clone(),
                modes: self.modes.clone(),
                start_hour: self.start.format(TIMESTAMP_FORMAT).to_string(),
                n_hours: self.n_hours,
                files,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let man: DemandManifest = io::read_json(&path)?;
        let start = parse_timestamp(&man.start_hour)
            .ok_or_else(|| Error::format(&path, format!("bad start_hour {:?}", man.start_hour)))?;
        if man.files.len() != man.modes.len() {
            return Err(Error::format(&path, "one binary file per mode required"));
        }
        let per_mode = man.zones.len() * man.n_hours;
        let mut counts = Vec::with_capacity(per_mode * man.modes.len());
        for (m, f) in man.files.iter().enumerate() {
            counts.extend(io::read_f64_le(&dir.join(f), per_mode, &man.modes[m])?);
        }
        DemandTensor::new(man.zones, man.modes, start, man.n_hours, counts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t0() -> NaiveDateTime {
        parse_timestamp("2018-01-01T00:00:00").unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let mut d = DemandTensor::zeros(vec!["a".into(), "b".into()], vec!["solo".into(), "shared".into()], t0(), 5).unwrap();
        d.add_count(1, 3, 1, 7.0);
        d.add_count(0, 0, 0, 2.0);
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        assert_eq!(DemandTensor::load(dir.path()).unwrap(), d);
        // zone-major layout within a mode file
        let raw = io::read_f64_le(&dir.path().join("mode_1.f64"), 10, "m").unwrap();
        assert_eq!(raw[5 + 3], 7.0);
    }

    #[test]
    fn hour_index_floors() {
        let d = DemandTensor::zeros(vec!["a".into()], vec!["solo".into()], t0(), 3).unwrap();
        assert_eq!(d.hour_index(parse_timestamp("2018-01-01 00:59:59").unwrap()), Some(0));
        assert_eq!(d.hour_index(parse_timestamp("2018-01-01 01:00:00").unwrap()), Some(1));
        assert_eq!(d.hour_index(parse_timestamp("2017-12-31 23:59:59").unwrap()), None);
        assert_eq!(d.hour_index(parse_timestamp("2018-01-01 03:00:00").unwrap()), None);
    }

    #[test]
    fn rejects_negative_counts_and_unaligned_start() {
        assert!(DemandTensor::new(vec!["a".into()], vec!["m".into()], t0(), 1, vec![-1.0]).is_err());
        let off = parse_timestamp("2018-01-01T00:30:00").unwrap();
        assert!(DemandTensor::zeros(vec!["a".into()], vec!["m".into()], off, 1).is_err());
    }
}
