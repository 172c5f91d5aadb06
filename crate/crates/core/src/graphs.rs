//! Zone graphs: neighborhood, distance, functionality and per-mode
//! mobility-pattern adjacency matrices, plus their renormalized forms
//! `D^{-1/2}(A + I)D^{-1/2}`.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::DemandTensor;
use crate::error::{Error, Result};
use crate::io;
use crate::numcore::Matrix;

/// Distances below this many kilometres are clamped before inversion.
pub const MIN_DISTANCE_KM: f64 = 0.1;
/// Floor on the functionality-vector distance.
pub const MIN_FUNCTIONALITY_DISTANCE: f64 = 1e-3;

const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub id: String,
    pub centroid_lng: f64,
    pub centroid_lat: f64,
    pub functionality: Vec<f64>,
}

/// Zones in a fixed order together with their boundary-sharing relation.
#[derive(Clone, Debug, PartialEq)]
pub struct ZoneTable {
    zones: Vec<Zone>,
    neighbors: Vec<Vec<usize>>,
}

impl ZoneTable {
    /// Validates ids, coordinates and the neighbor relation. Edges are
    /// given as index pairs and are interpreted as undirected.
    pub fn new(zones: Vec<Zone>, edges: &[(usize, usize)]) -> Result<Self> {
        let mut seen = HashSet::new();
        for z in &zones {
            if !seen.insert(z.id.as_str()) {
                return Err(Error::validation(format!("duplicate zone id {:?}", z.id)));
            }
            if !(-90.0..=90.0).contains(&z.centroid_lat) || !(-180.0..=180.0).contains(&z.centroid_lng) {
                return Err(Error::validation(format!(
                    "zone {:?} has out-of-range centroid ({}, {})",
                    z.id, z.centroid_lng, z.centroid_lat
                )));
            }
        }
        let n = zones.len();
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::validation(format!("edge ({a}, {b}) outside {n} zones")));
            }
            if a == b {
                return Err(Error::validation(format!("zone {:?} listed as its own neighbor", zones[a].id)));
            }
            if !neighbors[a].contains(&b) {
                neighbors[a].push(b);
            }
            if !neighbors[b].contains(&a) {
                neighbors[b].push(a);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(ZoneTable { zones, neighbors })
    }

    /// Builds a table from explicit per-zone neighbor lists, rejecting
    /// asymmetric relations instead of repairing them.
    pub fn with_neighbor_lists(zones: Vec<Zone>, lists: Vec<Vec<usize>>) -> Result<Self> {
        if lists.len() != zones.len() {
            return Err(Error::validation("one neighbor list per zone required"));
        }
        for (i, list) in lists.iter().enumerate() {
            for &j in list {
                if j >= lists.len() || !lists[j].contains(&i) {
                    return Err(Error::validation(format!(
                        "neighbor relation is not symmetric: {i} lists {j} but not the reverse"
                    )));
                }
            }
        }
        let edges: Vec<(usize, usize)> = lists
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().map(move |&j| (i, j)))
            .collect();
        ZoneTable::new(zones, &edges)
    }

    pub fn len(&self) -> usize {
        self.zones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zones.is_empty()
    }

    pub fn zones(&self) -> &[Zone] {
        &self.zones
    }

    pub fn ids(&self) -> Vec<String> {
        self.zones.iter().map(|z| z.id.clone()).collect()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.zones.iter().position(|z| z.id == id)
    }

    /// Undirected edges with `a < b`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, list) in self.neighbors.iter().enumerate() {
            for &b in list {
                if a < b {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Same zones in a new order: position `new` holds old zone `perm[new]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<ZoneTable> {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let zones = perm.iter().map(|&p| self.zones[p].clone()).collect();
        let edges: Vec<_> = self.edges().iter().map(|&(a, b)| (inverse[a], inverse[b])).collect();
        ZoneTable::new(zones, &edges)
    }

    /// Reads `zone_id,centroid_lng,centroid_lat,<attr>...` and
    /// `zone_id_a,zone_id_b`.
    pub fn load(zones_csv: &Path, adjacency_csv: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(zones_csv).map_err(|e| csv_err(zones_csv, e))?;
        let headers = rdr.headers().map_err(|e| csv_err(zones_csv, e))?.clone();
        let expected = ["zone_id", "centroid_lng", "centroid_lat"];
        if headers.len() < 3 || headers.iter().take(3).ne(expected) {
            return Err(Error::format(
                zones_csv,
                format!("header must start with {}", expected.join(",")),
            ));
        }
        let mut zones = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(zones_csv, e))?;
            let num = |k: usize| -> Result<f64> {
                rec.get(k)
                    .unwrap_or("")
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::format(zones_csv, format!("row {}: column {} is not a number", line + 2, headers.get(k).unwrap_or("?"))))
            };
            zones.push(Zone {
                id: rec.get(0).unwrap_or("").trim().to_string(),
                centroid_lng: num(1)?,
                centroid_lat: num(2)?,
                functionality: (3..headers.len()).map(num).collect::<Result<_>>()?,
            });
        }
        let index: HashMap<&str, usize> = zones.iter().enumerate().map(|(i, z)| (z.id.as_str(), i)).collect();
        let mut rdr = csv::Reader::from_path(adjacency_csv).map_err(|e| csv_err(adjacency_csv, e))?;
        let headers = rdr.headers().map_err(|e| csv_err(adjacency_csv, e))?.clone();
        if headers.iter().ne(["zone_id_a", "zone_id_b"]) {
            return Err(Error::format(adjacency_csv, "header must be zone_id_a,zone_id_b"));
        }
        let mut edges = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_err(adjacency_csv, e))?;
            let lookup = |k: usize| {
                let id = rec.get(k).unwrap_or("").trim();
                index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::format(adjacency_csv, format!("unknown zone id {id:?}")))
            };
            edges.push((lookup(0)?, lookup(1)?));
        }
        ZoneTable::new(zones, &edges)
    }

    pub fn save(&self, zones_csv: &Path, adjacency_csv: &Path) -> Result<()> {
        let k = self.zones.first().map_or(0, |z| z.functionality.len());
        let mut w = csv::Writer::from_path(zones_csv).map_err(|e| csv_err(zones_csv, e))?;
        let mut header = vec!["zone_id".to_string(), "centroid_lng".into(), "centroid_lat".into()];
        header.extend((0..k).map(|i| format!("attr{}", i + 1)));
        w.write_record(&header).map_err(|e| csv_err(zones_csv, e))?;
        for z in &self.zones {
            let mut row = vec![z.id.clone(), z.centroid_lng.to_string(), z.centroid_lat.to_string()];
            row.extend(z.functionality.iter().map(f64::to_string));
            w.write_record(&row).map_err(|e| csv_err(zones_csv, e))?;
        }
        w.flush().map_err(|e| Error::io(zones_csv, e))?;

        let mut w = csv::Writer::from_path(adjacency_csv).map_err(|e| csv_err(adjacency_csv, e))?;
        w.write_record(["zone_id_a", "zone_id_b"]).map_err(|e| csv_err(adjacency_csv, e))?;
        for (a, b) in self.edges() {
            w.write_record([&self.zones[a].id, &self.zones[b].id])
                .map_err(|e| csv_err(adjacency_csv, e))?;
        }
        w.flush().map_err(|e| Error::io(adjacency_csv, e))?;
        Ok(())
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

pub fn build_neighborhood(zones: &ZoneTable) -> Matrix {
    let n = zones.len();
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for &j in zones.neighbors(i) {
            a.set(i, j, 1.0);
        }
    }
    a
}

/// Great-circle distance in kilometres between two (lng, lat) points given
/// in degrees.
pub fn haversine_km(lng1: f64, lat1: f64, lng2: f64, lat2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lng2 - lng1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

pub fn build_distance(zones: &ZoneTable) -> Matrix {
    let z = zones.zones();
    Matrix::from_fn(z.len(), z.len(), |i, j| {
        if i == j {
            return 0.0;
        }
        let d = haversine_km(z[i].centroid_lng, z[i].centroid_lat, z[j].centroid_lng, z[j].centroid_lat);
        1.0 / d.max(MIN_DISTANCE_KM)
    })
}

/// Column-standardizes functionality attributes over zones (population
/// variance), dropping constant columns.
pub fn standardize_functionality(zones: &ZoneTable) -> Result<Vec<Vec<f64>>> {
    let z = zones.zones();
    let k = z.first().map_or(0, |z| z.functionality.len());
    if k == 0 && !z.is_empty() {
        return Err(Error::validation("functionality vectors must have at least one attribute"));
    }
    if let Some(bad) = z.iter().find(|zz| zz.functionality.len() != k) {
        return Err(Error::validation(format!(
            "zone {:?} has {} functionality attributes, expected {k}",
            bad.id,
            bad.functionality.len()
        )));
    }
    let n = z.len() as f64;
    let mut out = vec![Vec::new(); z.len()];
    for c in 0..k {
        let mean = z.iter().map(|zz| zz.functionality[c]).sum::<f64>() / n;
        let var = z.iter().map(|zz| (zz.functionality[c] - mean).powi(2)).sum::<f64>() / n;
        if var <= 1e-24 * mean.abs().max(1.0) {
            continue;
        }
        let sd = var.sqrt();
        for (row, zz) in out.iter_mut().zip(z) {
            row.push((zz.functionality[c] - mean) / sd);
        }
    }
    Ok(out)
}

/// Inverse Euclidean distance between standardized attribute vectors.
pub fn functionality_from_standardized(s: &[Vec<f64>]) -> Matrix {
    Matrix::from_fn(s.len(), s.len(), |i, j| {
        if i == j {
            return 0.0;
        }
        let d = s[i]
            .iter()
            .zip(&s[j])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        1.0 / d.max(MIN_FUNCTIONALITY_DISTANCE)
    })
}

pub fn build_functionality(zones: &ZoneTable) -> Result<Matrix> {
    Ok(functionality_from_standardized(&standardize_functionality(zones)?))
}

/// Pearson correlation of two equally long series, `None` when either has
/// zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Mobility-pattern graph for `mode` from hours `[hours.start, hours.end)`
/// of `demand`. Only the training window should be passed here.
pub fn build_mobility(demand: &DemandTensor, mode: usize, hours: std::ops::Range<usize>) -> Result<Matrix> {
    if hours.end > demand.n_hours() || hours.start >= hours.end {
        return Err(Error::validation(format!(
            "mobility window {hours:?} outside demand of {} hours",
            demand.n_hours()
        )));
    }
    if hours.len() < 2 {
        return Err(Error::validation("mobility window needs at least 2 hours"));
    }
    if mode >= demand.n_modes() {
        return Err(Error::validation(format!("mode index {mode} out of range")));
    }
    let n = demand.n_zones();
    let series: Vec<&[f64]> = (0..n).map(|z| &demand.series(z, mode)[hours.clone()]).collect();
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let c = pearson(series[i], series[j]).unwrap_or(0.0).max(0.0);
            a.set(i, j, c);
            a.set(j, i, c);
        }
    }
    Ok(a)
}

/// `D^{-1/2}(A + I)D^{-1/2}` with `D` the row sums of `A + I`.
pub fn renormalize(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Shape {
            op: "renormalize",
            lhs: a.shape(),
            rhs: (n, n),
        });
    }
    if let Some(v) = a.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::validation(format!(
            "adjacency entries must be nonnegative and finite, found {v}"
        )));
    }
    let tilde = Matrix::from_fn(n, n, |i, j| a.get(i, j) + if i == j { 1.0 } else { 0.0 });
    let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / tilde.row(i).iter().sum::<f64>().sqrt()).collect();
    Ok(Matrix::from_fn(n, n, |i, j| inv_sqrt[i] * tilde.get(i, j) * inv_sqrt[j]))
}

/// Graph kinds in the column order used by the convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphKind {
    Neighborhood,
    Distance,
    Functionality,
    Mobility,
}

impl GraphKind {
    pub const ALL: [GraphKind; 4] = [
        GraphKind::Neighborhood,
        GraphKind::Distance,
        GraphKind::Functionality,
        GraphKind::Mobility,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            GraphKind::Neighborhood => "N",
            GraphKind::Distance => "D",
            GraphKind::Functionality => "F",
            GraphKind::Mobility => "P",
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphIndex {
    zones: Vec<String>,
    n_modes: usize,
    graphs: Vec<String>,
}

/// Raw and renormalized graphs. The first three are shared by all modes;
/// the mobility graph exists once per mode.
#[derive(Clone, Debug)]
pub struct GraphSet {
    pub zone_ids: Vec<String>,
    pub neighborhood: Matrix,
    pub distance: Matrix,
    pub functionality: Matrix,
    pub mobility: Vec<Matrix>,
    normalized_shared: [Arc<Matrix>; 3],
    normalized_mobility: Vec<Arc<Matrix>>,
}

impl GraphSet {
    pub fn build(zones: &ZoneTable, demand: &DemandTensor, train_hours: std::ops::Range<usize>) -> Result<Self> {
        if demand.zones() != zones.ids().as_slice() {
            return Err(Error::validation("zone order of demand tensor and zone table differ"));
        }
        let mobility = (0..demand.n_modes())
            .map(|m| build_mobility(demand, m, train_hours.clone()))
            .collect::<Result<Vec<_>>>()?;
        GraphSet::from_raw(
            zones.ids(),
            build_neighborhood(zones),
            build_distance(zones),
            build_functionality(zones)?,
            mobility,
        )
    }

    pub fn from_raw(
        zone_ids: Vec<String>,
        neighborhood: Matrix,
        distance: Matrix,
        functionality: Matrix,
        mobility: Vec<Matrix>,
    ) -> Result<Self> {
        let n = zone_ids.len();
        for m in [&neighborhood, &distance, &functionality].into_iter().chain(&mobility) {
            if m.shape() != (n, n) {
                return Err(Error::Shape {
                    op: "graph_set",
                    lhs: (n, n),
                    rhs: m.shape(),
                });
            }
        }
        let normalized_shared = [
            Arc::new(renormalize(&neighborhood)?),
            Arc::new(renormalize(&distance)?),
            Arc::new(renormalize(&functionality)?),
        ];
        let normalized_mobility = mobility
            .iter()
            .map(|m| renormalize(m).map(Arc::new))
            .collect::<Result<_>>()?;
        Ok(GraphSet {
            zone_ids,
            neighborhood,
            distance,
            functionality,
            mobility,
            normalized_shared,
            normalized_mobility,
        })
    }

    pub fn n_zones(&self) -> usize {
        self.neighborhood.rows()
    }

    pub fn n_modes(&self) -> usize {
        self.mobility.len()
    }

    /// Renormalized `[Â_N, Â_D, Â_F, Â_P^mode]`.
    pub fn normalized(&self, mode: usize) -> [Arc<Matrix>; 4] {
        let [n, d, f] = &self.normalized_shared;
        [n.clone(), d.clone(), f.clone(), self.normalized_mobility[mode].clone()]
    }

    /// All raw matrices with stable names, for persistence.
    pub fn named_raw(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("A_N".to_string(), &self.neighborhood),
            ("A_D".to_string(), &self.distance),
            ("A_F".to_string(), &self.functionality),
        ];
        for (m, a) in self.mobility.iter().enumerate() {
            out.push((format!("A_P.{m}"), a));
        }
        out
    }

    pub fn from_named_raw(zone_ids: Vec<String>, mut named: HashMap<String, Matrix>, n_modes: usize) -> Result<Self> {
        let mut take = |k: &str| {
            named
                .remove(k)
                .ok_or_else(|| Error::validation(format!("graph {k} missing")))
        };
        let n = take("A_N")?;
        let d = take("A_D")?;
        let f = take("A_F")?;
        let p = (0..n_modes).map(|m| take(&format!("A_P.{m}"))).collect::<Result<Vec<_>>>()?;
        GraphSet::from_raw(zone_ids, n, d, f, p)
    }

    /// Raw matrices as little-endian binaries plus a `graphs.json` index.
    pub fn save(&self, dir: &Path) -> Result<()> {
        io::ensure_dir(dir)?;
        let names: Vec<String> = self.named_raw().into_iter().map(|(n, _)| n).collect();
        for (name, a) in self.named_raw() {
            io::write_matrix(&dir.join(format!("{name}.f64")), a)?;
        }
        io::write_json(
            &dir.join("graphs.json"),
            &GraphIndex {
                zones: self.zone_ids.clone(),
                n_modes: self.n_modes(),
                graphs: names,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: GraphIndex = io::read_json(&dir.join("graphs.json"))?;
        let n = index.zones.len();
        let mut named = HashMap::new();
        for name in &index.graphs {
            named.insert(name.clone(), io::read_matrix(&dir.join(format!("{name}.f64")), n, n, name)?);
        }
        GraphSet::from_named_raw(index.zones, named, index.n_modes)
    }

    /// Same graphs with zones reordered (`perm[new] = old`).
    pub fn permuted(&self, perm: &[usize]) -> Result<GraphSet> {
        GraphSet::from_raw(
            perm.iter().map(|&p| self.zone_ids[p].clone()).collect(),
            self.neighborhood.permute_symmetric(perm),
            self.distance.permute_symmetric(perm),
            self.functionality.permute_symmetric(perm),
            self.mobility.iter().map(|m| m.permute_symmetric(perm)).collect(),
        )
    }
}
