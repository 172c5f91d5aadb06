use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::{parse_timestamp, DemandTensor};
use crate::error::{Error, Result};
use crate::graphs::csv_err;

#[derive(Clone, Debug, PartialEq)]
pub struct TripRecord {
    pub pickup_time: NaiveDateTime,
    pub pickup_zone: String,
    pub mode: String,
}

/// Records that did not make it into the tensor, by reason.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: u64,
    pub unknown_zone: u64,
    pub unknown_mode: u64,
    pub out_of_range: u64,
    pub malformed: u64,
}

/// Column names of the trips file. Defaults match the native
/// `pickup_datetime,pickup_zone,mode` layout; raw TLC exports are read by
/// pointing these at their own headers and mapping mode values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripColumns {
    pub pickup_datetime: String,
    pub pickup_zone: String,
    pub mode: String,
    /// Raw mode value -> configured mode label. Empty means identity.
    pub mode_values: BTreeMap<String, String>,
}

impl Default for TripColumns {
    fn default() -> Self {
        TripColumns {
            pickup_datetime: "pickup_datetime".into(),
            pickup_zone: "pickup_zone".into(),
            mode: "mode".into(),
            mode_values: BTreeMap::new(),
        }
    }
}

/// Counts trips per (zone, hour, mode). Records outside the zone set, the
/// mode set or the time axis are skipped and tallied in the report.
pub fn aggregate(
    trips: impl IntoIterator<Item = TripRecord>,
    zones: &[String],
    modes: &[String],
    start: NaiveDateTime,
    n_hours: usize,
) -> Result<(DemandTensor, IngestReport)> {
    let mut demand = DemandTensor::zeros(zones.to_vec(), modes.to_vec(), start, n_hours)?;
    let zone_index: HashMap<&str, usize> = zones.iter().enumerate().map(|(i, z)| (z.as_str(), i)).collect();
    let mode_index: HashMap<&str, usize> = modes.iter().enumerate().map(|(i, m)| (m.as_str(), i)).collect();
    let mut report = IngestReport::default();
    for trip in trips {
        let Some(&z) = zone_index.get(trip.pickup_zone.as_str()) else {
            report.unknown_zone += 1;
            continue;
        };
        let Some(&m) = mode_index.get(trip.mode.as_str()) else {
            report.unknown_mode += 1;
            continue;
        };
        let Some(h) = demand.hour_index(trip.pickup_time) else {
            report.out_of_range += 1;
            continue;
        };
        demand.add_count(z, h, m, 1.0);
        report.accepted += 1;
    }
    Ok((demand, report))
}

/// Streams trip records from a CSV file. Rows whose timestamp cannot be
/// parsed are counted as malformed and skipped.
pub fn read_trips(path: &Path, columns: &TripColumns) -> Result<(Vec<TripRecord>, u64)> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::format(path, format!("missing column {name:?}")))
    };
    let (ct, cz, cm) = (col(&columns.pickup_datetime)?, col(&columns.pickup_zone)?, col(&columns.mode)?);
    let mut out = Vec::new();
    let mut malformed = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let Some(t) = rec.get(ct).and_then(parse_timestamp) else {
            malformed += 1;
            continue;
        };
        let raw_mode = rec.get(cm).unwrap_or("").trim();
        let mode = if columns.mode_values.is_empty() {
            raw_mode.to_string()
        } else {
            match columns.mode_values.get(raw_mode) {
                Some(m) => m.clone(),
                None => format!("<unmapped:{raw_mode}>"),
            }
        };
        out.push(TripRecord {
            pickup_time: t,
            pickup_zone: rec.get(cz).unwrap_or("").trim().to_string(),
            mode,
        });
    }
    Ok((out, malformed))
}
