//! Synthetic multi-mode demand with a tunable cross-mode coupling.
//!
//! A zone's latent intensity is `base · daily · weekly`, where the daily
//! factor blends a business and a residential hourly profile by the zone's
//! land-use mix and carries a slowly varying log-scale disturbance (a
//! city-wide AR(1) term plus a spatially smoothed per-zone AR(1) term).
//! Mode `m` then draws `Poisson(share_m · λ · (ρ + (1 − ρ) ε))` with an
//! independent mean-one lognormal `ε` per mode, zone and hour.

use chrono::{Datelike, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{parse_timestamp, DemandTensor};
use crate::error::{Error, Result};
use crate::graphs::{Zone, ZoneTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_zones: usize,
    pub n_hours: usize,
    pub n_modes: usize,
    /// Cross-mode coupling in `[0, 1]`.
    pub rho: f64,
    /// Median hourly trips of a zone at its profile peak.
    pub base_demand: f64,
    /// Log-scale spread of zone base demand.
    pub base_spread: f64,
    /// Log-scale standard deviation of the per-mode noise `ε`.
    pub mode_noise: f64,
    /// Stationary standard deviation of the log-scale disturbance.
    pub disturbance: f64,
    pub start: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_zones: 10,
            n_hours: 2000,
            n_modes: 2,
            rho: 0.9,
            base_demand: 40.0,
            base_spread: 0.5,
            mode_noise: 0.5,
            disturbance: 0.25,
            start: "2018-01-01T00:00:00".into(),
        }
    }
}

/// Generated zones plus observed counts and the pre-sampling intensities.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub zones: ZoneTable,
    pub demand: DemandTensor,
    pub intensity: DemandTensor,
}

pub fn mode_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|m| match m {
            0 => "solo".to_string(),
            1 => "shared".to_string(),
            _ => format!("mode{m}"),
        })
        .collect()
}

fn mode_shares(n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|m| 0.4f64.powi(m as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn bump(h: f64, center: f64, width: f64) -> f64 {
    let d = (h - center).abs().min(24.0 - (h - center).abs());
    (-0.5 * (d / width).powi(2)).exp()
}

fn business_profile(h: f64) -> f64 {
    0.08 + bump(h, 8.5, 1.3) + 0.9 * bump(h, 18.0, 1.6) + 0.45 * bump(h, 13.0, 2.0)
}

fn residential_profile(h: f64) -> f64 {
    0.12 + 0.7 * bump(h, 7.5, 1.2) + 0.6 * bump(h, 20.5, 2.2) + 0.3 * bump(h, 0.5, 1.5)
}

fn weekly_factor(t: NaiveDateTime) -> f64 {
    match t.weekday().num_days_from_monday() {
        5 => 0.85,
        6 => 0.75,
        _ => 1.0,
    }
}

pub fn synthesize(cfg: &SynthConfig, seed: u64) -> Result<Synthetic> {
    if !(0.0..=1.0).contains(&cfg.rho) {
        return Err(Error::validation(format!("coupling rho must lie in [0, 1], got {}", cfg.rho)));
    }
    if cfg.n_zones == 0 || cfg.n_modes == 0 || cfg.n_hours == 0 {
        return Err(Error::validation("synthetic data needs at least one zone, mode and hour"));
    }
    let start = parse_timestamp(&cfg.start)
        .ok_or_else(|| Error::validation(format!("bad synthetic start time {:?}", cfg.start)))?;
    let (nz, nh, nm) = (cfg.n_zones, cfg.n_hours, cfg.n_modes);

    let mut zone_rng = ChaCha8Rng::seed_from_u64(seed);
    zone_rng.set_stream(1);
    let mut latent_rng = ChaCha8Rng::seed_from_u64(seed);
    latent_rng.set_stream(2);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(3);
    let mut count_rng = ChaCha8Rng::seed_from_u64(seed);
    count_rng.set_stream(4);

    // Zones on a square-ish grid with rook adjacency.
    let cols = (nz as f64).sqrt().ceil() as usize;
    let mut zones = Vec::with_capacity(nz);
    let mut business = Vec::with_capacity(nz);
    let mut base = Vec::with_capacity(nz);
    let spread = Normal::new(0.0, cfg.base_spread.max(0.0)).map_err(|e| Error::validation(e.to_string()))?;
    for k in 0..nz {
        let (r, c) = (k / cols, k % cols);
        let b: f64 = zone_rng.random_range(0.0..1.0);
        let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-1.0..1.0);
        let attrs = vec![
            (60.0 * b + 5.0 * jitter(&mut zone_rng)).max(0.0),
            (60.0 * (1.0 - b) + 5.0 * jitter(&mut zone_rng)).max(0.0),
            10.0 + 3.0 * jitter(&mut zone_rng),
        ];
        zones.push(Zone {
            id: (k + 1).to_string(),
            centroid_lng: -74.02 + 0.012 * c as f64,
            centroid_lat: 40.70 + 0.012 * r as f64,
            functionality: attrs,
        });
        business.push(b);
        base.push(cfg.base_demand * spread.sample(&mut zone_rng).exp());
    }
    let mut edges = Vec::new();
    for k in 0..nz {
        let c = k % cols;
        if c + 1 < cols && k + 1 < nz {
            edges.push((k, k + 1));
        }
        if k + cols < nz {
            edges.push((k, k + cols));
        }
    }
    let table = ZoneTable::new(zones, &edges)?;

    // Log-scale disturbances: city AR(1) plus smoothed zone AR(1).
    let (phi_city, phi_zone) = (0.97f64, 0.9f64);
    let sd_city = cfg.disturbance * 0.7 * (1.0 - phi_city * phi_city).sqrt();
    let sd_zone = cfg.disturbance * 0.7 * (1.0 - phi_zone * phi_zone).sqrt();
    let innov_city = Normal::new(0.0, sd_city).map_err(|e| Error::validation(e.to_string()))?;
    let innov_zone = Normal::new(0.0, sd_zone).map_err(|e| Error::validation(e.to_string()))?;
    let mut city = 0.0;
    let mut local = vec![0.0; nz];
    let mut lambda = vec![0.0; nz * nh];
    for h in 0..nh {
        city = phi_city * city + innov_city.sample(&mut latent_rng);
        for u in local.iter_mut() {
            *u = phi_zone * *u + innov_zone.sample(&mut latent_rng);
        }
        let t = start + chrono::Duration::hours(h as i64);
        let hour = t.hour() as f64 + 0.5;
        let week = weekly_factor(t);
        for z in 0..nz {
            let nb = table.neighbors(z);
            let smooth = if nb.is_empty() {
                local[z]
            } else {
                0.5 * local[z] + 0.5 * nb.iter().map(|&j| local[j]).sum::<f64>() / nb.len() as f64
            };
            let b = business[z];
            let daily = b * business_profile(hour) + (1.0 - b) * residential_profile(hour);
            lambda[z * nh + h] = base[z] * daily * week * (city + smooth).exp();
        }
    }

    let sigma = cfg.mode_noise.max(0.0);
    let eps = LogNormal::new(-0.5 * sigma * sigma, sigma).map_err(|e| Error::validation(e.to_string()))?;
    let shares = mode_shares(nm);
    let mut intensity = Vec::with_capacity(nm * nz * nh);
    for share in &shares {
        for z in 0..nz {
            for h in 0..nh {
                let e = eps.sample(&mut noise_rng);
                intensity.push(share * lambda[z * nh + h] * (cfg.rho + (1.0 - cfg.rho) * e));
            }
        }
    }
    let mut counts = Vec::with_capacity(intensity.len());
    for &mu in &intensity {
        let c = if mu > 0.0 {
            Poisson::new(mu)
                .map_err(|e| Error::numeric(e.to_string()))?
                .sample(&mut count_rng)
        } else {
            0.0
        };
        counts.push(c);
    }
    let ids = table.ids();
    let modes = mode_names(nm);
    Ok(Synthetic {
        demand: DemandTensor::new(ids.clone(), modes.clone(), start, nh, counts)?,
        intensity: DemandTensor::new(ids, modes, start, nh, intensity)?,
        zones: table,
    })
}
