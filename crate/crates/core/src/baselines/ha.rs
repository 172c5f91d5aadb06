use crate::dataset::{DemandTensor, SampleSet, TIMESTAMP_FORMAT};
use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub const HA_WEEKS: usize = 4;
const WEEK: usize = 168;

/// Mean of the same hour-of-week over the previous four weeks.
pub fn ha_predict(demand: &DemandTensor, zone: usize, mode: usize, hour: usize) -> Result<f64> {
    let first = HA_WEEKS * WEEK;
    if hour < first || hour >= demand.n_hours() {
        return Err(Error::validation(format!(
            "historical average for {} needs {HA_WEEKS} weeks of history; first feasible target is {}",
            demand.hour_time(hour).format(TIMESTAMP_FORMAT),
            demand.hour_time(first).format(TIMESTAMP_FORMAT)
        )));
    }
    let series = demand.series(zone, mode);
    Ok((1..=HA_WEEKS).map(|k| series[hour - k * WEEK]).sum::<f64>() / HA_WEEKS as f64)
}

/// Predictions for every label of `set`, laid out like the network outputs.
pub fn ha_predict_set(demand: &DemandTensor, set: &SampleSet) -> Result<Vec<Matrix>> {
    if demand.zones() != set.zones() || demand.modes() != set.modes() {
        return Err(Error::validation("demand tensor and samples use different zone or mode orders"));
    }
    (0..set.n_modes())
        .map(|m| {
            let mut out = Vec::with_capacity(set.len() * set.n_zones());
            for &h in set.hours() {
                for z in 0..set.n_zones() {
                    out.push(ha_predict(demand, z, m, h)?);
                }
            }
            Matrix::new(out.len(), 1, out)
        })
        .collect()
}
