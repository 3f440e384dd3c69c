//! Customer-station utilities for the siting models: negative distance, or
//! fold-averaged ratio utilities simulated from estimated MNL / MXL folds.
//!
//! Every fold's coefficients are divided by its own isWalkHome mean, which
//! removes the fold-specific error scale. Error draws `eps` are distinct per
//! (customer, station, fold, draw); mixing draws `eta` are distinct per
//! (fold, draw, coefficient) and shared by all customer-station pairs.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::hash_json;
use crate::choice::{design_row, Coef, ModelKind, NearRule, ParameterSet, K};
use crate::rng;
use crate::geo::LatLon;
use crate::spatial::{AttributeVector, ChoiceSetBuilder, RoadNetwork};
use crate::stats::{nearest_rank_sorted, sort_floats};

#[derive(Debug, Error)]
pub enum UtilityError {
    #[error("fold {0}: isWalkHome mean coefficient is zero")]
    ZeroWalkCoefficient(usize),
    #[error("fold {fold} is {found}, expected {expected}")]
    WrongModel { fold: usize, expected: ModelKind, found: ModelKind },
    #[error("no folds given")]
    NoFolds,
    #[error("draws per fold must be positive")]
    NoDraws,
    #[error("percentile must lie in (0, 1], got {0}")]
    BadPercentile(f64),
    #[error("attribute grid has {have} entries, expected {rows} x {cols}")]
    Shape { have: usize, rows: usize, cols: usize },
    #[error("non-finite input for customer `{customer}`, station `{station}`")]
    NonFinite { customer: String, station: String },
    #[error("station `{station}` is unavailable or unreachable from customer `{customer}`")]
    Unavailable { customer: String, station: String },
    #[error(transparent)]
    Spatial(#[from] crate::spatial::SpatialError),
    #[error("{0}")]
    Parse(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The four utility specifications compared by the siting experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UtilitySpec {
    #[serde(rename = "distance")]
    Distance,
    #[serde(rename = "mnl")]
    Mnl,
    #[serde(rename = "mxl-mean")]
    MxlMean,
    #[serde(rename = "mxl-25")]
    Mxl25,
}

impl UtilitySpec {
    pub const ALL: [UtilitySpec; 4] = [UtilitySpec::Distance, UtilitySpec::Mnl, UtilitySpec::MxlMean, UtilitySpec::Mxl25];

    pub fn name(self) -> &'static str {
        match self {
            UtilitySpec::Distance => "distance",
            UtilitySpec::Mnl => "mnl",
            UtilitySpec::MxlMean => "mxl-mean",
            UtilitySpec::Mxl25 => "mxl-25",
        }
    }
}

impl fmt::Display for UtilitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UtilitySpec {
    type Err = UtilityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        UtilitySpec::ALL
            .into_iter()
            .find(|u| u.name() == norm || u.name().replace('-', "") == norm)
            .ok_or_else(|| UtilityError::Parse(format!("unknown utility spec `{s}`")))
    }
}

/// Statistic taken over a pair's simulated scenario utilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Mean,
    /// Nearest-rank percentile, `q` in (0, 1].
    Percentile(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub folds: Vec<ParameterSet>,
    pub draws_per_fold: usize,
    pub seed: u64,
    pub near: NearRule,
}

impl SimulationConfig {
    /// 1,000 draws per fold for MNL folds, 2,000 for MXL folds.
    pub fn new(folds: Vec<ParameterSet>, seed: u64) -> Self {
        let draws_per_fold = match folds.first().map(|p| p.model_kind) {
            Some(ModelKind::Mxl) => 2000,
            _ => 1000,
        };
        Self { folds, draws_per_fold, seed, near: NearRule::default() }
    }
}

/// Attributes of every customer-station pair, row-major by customer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeGrid {
    pub customers: Vec<String>,
    pub stations: Vec<String>,
    pub attrs: Vec<AttributeVector>,
}

impl AttributeGrid {
    pub fn new(customers: Vec<String>, stations: Vec<String>, attrs: Vec<AttributeVector>) -> Result<Self, UtilityError> {
        if attrs.len() != customers.len() * stations.len() {
            return Err(UtilityError::Shape { have: attrs.len(), rows: customers.len(), cols: stations.len() });
        }
        Ok(Self { customers, stations, attrs })
    }

    pub fn get(&self, i: usize, j: usize) -> &AttributeVector {
        &self.attrs[i * self.stations.len() + j]
    }
}

/// Encodes every customer-station pair at time `at`, with the customer
/// location standing in for the home. Every station must be in every
/// customer's choice set (right level, open, reachable).
pub fn pair_attributes(
    customers: &[(String, LatLon)],
    builder: &ChoiceSetBuilder<'_>,
    station_ids: &[String],
    net: &RoadNetwork,
    at: chrono::DateTime<chrono::Utc>,
) -> Result<AttributeGrid, UtilityError> {
    let rows = customers
        .par_iter()
        .map(|(cid, pos)| -> Result<Vec<AttributeVector>, UtilityError> {
            let set: std::collections::HashMap<String, AttributeVector> = builder.build(net, *pos, at)?.into_iter().collect();
            station_ids
                .iter()
                .map(|sid| {
                    set.get(sid).copied().ok_or_else(|| UtilityError::Unavailable { customer: cid.clone(), station: sid.clone() })
                })
                .collect()
        })
        .collect::<Result<Vec<_>, _>>()?;
    AttributeGrid::new(customers.iter().map(|c| c.0.clone()).collect(), station_ids.to_vec(), rows.concat())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec: UtilitySpec,
    pub seed: u64,
    pub config_hash: String,
}

/// Dense customers x stations utilities.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityMatrix {
    pub customers: Vec<String>,
    pub stations: Vec<String>,
    /// Row-major by customer.
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

impl UtilityMatrix {
    pub fn n_customers(&self) -> usize {
        self.customers.len()
    }

    pub fn n_stations(&self) -> usize {
        self.stations.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.stations.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.stations.len();
        &self.values[i * m..(i + 1) * m]
    }

    pub fn station_index(&self, id: &str) -> Option<usize> {
        self.stations.iter().position(|s| s == id)
    }

    /// `customer_id,station_id,u`, customers outer, stations inner.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), UtilityError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["customer_id", "station_id", "u"])?;
        for (i, c) in self.customers.iter().enumerate() {
            for (j, s) in self.stations.iter().enumerate() {
                w.write_record([c.as_str(), s.as_str(), &self.get(i, j).to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV layout; any row order is accepted but every pair must
    /// appear exactly once. Customer and station order follow first
    /// appearance.
    pub fn read_csv<R: Read>(input: R, provenance: Provenance) -> Result<Self, UtilityError> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        let col = |name: &str| {
            headers.iter().position(|h| h == name).ok_or_else(|| UtilityError::Parse(format!("missing column `{name}`")))
        };
        let (ci, si, ui) = (col("customer_id")?, col("station_id")?, col("u")?);
        let mut customers: Vec<String> = Vec::new();
        let mut stations: Vec<String> = Vec::new();
        let mut cix = std::collections::HashMap::new();
        let mut six = std::collections::HashMap::new();
        let mut entries = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let c = rec[ci].to_string();
            let s = rec[si].to_string();
            let u: f64 = rec[ui]
                .trim()
                .parse()
                .map_err(|_| UtilityError::Parse(format!("line {}: bad utility `{}`", line + 2, &rec[ui])))?;
            let i = *cix.entry(c.clone()).or_insert_with(|| {
                customers.push(c.clone());
                customers.len() - 1
            });
            let j = *six.entry(s.clone()).or_insert_with(|| {
                stations.push(s.clone());
                stations.len() - 1
            });
            entries.push((i, j, u));
        }
        let m = stations.len();
        let mut values = vec![f64::NAN; customers.len() * m];
        for (i, j, u) in entries {
            if !values[i * m + j].is_nan() {
                return Err(UtilityError::Parse(format!("duplicate pair ({}, {})", customers[i], stations[j])));
            }
            values[i * m + j] = u;
        }
        if let Some(p) = values.iter().position(|v| v.is_nan()) {
            return Err(UtilityError::Parse(format!("missing pair ({}, {})", customers[p / m], stations[p % m])));
        }
        Ok(Self { customers, stations, values, provenance })
    }
}

/// `u_ij = -distance_ij`.
pub fn distance_utilities(
    customers: Vec<String>,
    stations: Vec<String>,
    distances_km: &[f64],
) -> Result<UtilityMatrix, UtilityError> {
    if distances_km.len() != customers.len() * stations.len() {
        return Err(UtilityError::Shape { have: distances_km.len(), rows: customers.len(), cols: stations.len() });
    }
    if let Some(p) = distances_km.iter().position(|d| !d.is_finite()) {
        let m = stations.len();
        return Err(UtilityError::NonFinite { customer: customers[p / m].clone(), station: stations[p % m].clone() });
    }
    Ok(UtilityMatrix {
        customers,
        stations,
        values: distances_km.iter().map(|d| -d).collect(),
        provenance: Provenance { spec: UtilitySpec::Distance, seed: 0, config_hash: String::new() },
    })
}

pub fn grid_distances(grid: &AttributeGrid) -> Vec<f64> {
    grid.attrs.iter().map(|a| a.dist_km).collect()
}

/// Scenario coefficients `(mu + sigma * eta) / mu_isWalkHome`.
pub fn ratio_coefficients(p: &ParameterSet, eta: &[f64; K]) -> [f64; K] {
    let w = p.mu[Coef::IsWalkHome.index()];
    let mut b = [0.0; K];
    for k in 0..K {
        b[k] = (p.mu[k] + p.sigma[k] * eta[k]) / w;
    }
    b
}

/// One fold's scenario utility of a pair: the scenario coefficients applied
/// to the design row plus the error term divided by the fold's isWalkHome
/// mean. `eps_hat` is the error on the fold's estimated scale.
pub fn ratio_utility(p: &ParameterSet, z: &[f64; K], eta: &[f64; K], eps_hat: f64) -> f64 {
    scenario_utility(&ratio_coefficients(p, eta), z, eps_hat, p.mu[Coef::IsWalkHome.index()])
}

#[inline]
fn scenario_utility(b: &[f64; K], z: &[f64; K], eps_hat: f64, walk: f64) -> f64 {
    let mut u = 0.0;
    for k in 0..K {
        u += b[k] * z[k];
    }
    u + eps_hat / walk
}

const EPS_TAG: u64 = 0xE95;
const ETA_TAG: u64 = 0xE7A;

/// Mixing draws of fold `n`: `draws x K` standard normals.
pub fn fold_eta(seed: u64, n: usize, draws: usize) -> Vec<[f64; K]> {
    let mut r = rng::stream(seed, &[ETA_TAG, n as u64]);
    (0..draws)
        .map(|_| {
            let mut e = [0.0; K];
            for v in e.iter_mut() {
                *v = StandardNormal.sample(&mut r);
            }
            e
        })
        .collect()
}

/// Base Gumbel draws of pair (i, j) in fold `n`.
pub fn pair_eps(seed: u64, i: usize, j: usize, n: usize, draws: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, &[EPS_TAG, i as u64, j as u64, n as u64]);
    (0..draws).map(|_| rng::gumbel(&mut r)).collect()
}

fn check_folds(cfg: &SimulationConfig, expected: ModelKind) -> Result<(), UtilityError> {
    if cfg.folds.is_empty() {
        return Err(UtilityError::NoFolds);
    }
    if cfg.draws_per_fold == 0 {
        return Err(UtilityError::NoDraws);
    }
    for (n, p) in cfg.folds.iter().enumerate() {
        if p.model_kind != expected {
            return Err(UtilityError::WrongModel { fold: n, expected, found: p.model_kind });
        }
        if p.mu[Coef::IsWalkHome.index()] == 0.0 {
            return Err(UtilityError::ZeroWalkCoefficient(n));
        }
    }
    Ok(())
}

/// Shared engine. With `mixing = false` every eta is zero, so the MNL path
/// and an all-zero-sigma MXL path compute identical numbers.
fn simulate(
    grid: &AttributeGrid,
    cfg: &SimulationConfig,
    statistic: Statistic,
    mixing: bool,
    spec: UtilitySpec,
) -> Result<UtilityMatrix, UtilityError> {
    if let Statistic::Percentile(q) = statistic {
        if !(q > 0.0 && q <= 1.0) {
            return Err(UtilityError::BadPercentile(q));
        }
    }
    let r_count = cfg.draws_per_fold;
    // per fold, per draw scenario coefficients
    let coefs: Vec<Vec<[f64; K]>> = cfg
        .folds
        .iter()
        .enumerate()
        .map(|(n, p)| {
            let etas = if mixing { fold_eta(cfg.seed, n, r_count) } else { vec![[0.0; K]; r_count] };
            etas.iter().map(|e| ratio_coefficients(p, e)).collect()
        })
        .collect();
    let walks: Vec<f64> = cfg.folds.iter().map(|p| p.mu[Coef::IsWalkHome.index()]).collect();
    let m = grid.stations.len();
    let values: Vec<f64> = (0..grid.customers.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let coefs = &coefs;
            let walks = &walks;
            (0..m).map(move |j| {
                let z = design_row(grid.get(i, j), cfg.near);
                let mut scen = Vec::with_capacity(coefs.len() * r_count);
                for (n, fold) in coefs.iter().enumerate() {
                    let eps = pair_eps(cfg.seed, i, j, n, r_count);
                    for (b, e) in fold.iter().zip(&eps) {
                        scen.push(scenario_utility(b, &z, *e, walks[n]));
                    }
                }
                match statistic {
                    Statistic::Mean => scen.iter().sum::<f64>() / scen.len() as f64,
                    Statistic::Percentile(q) => {
                        sort_floats(&mut scen);
                        nearest_rank_sorted(&scen, q).expect("non-empty scenarios")
                    }
                }
            })
        })
        .collect();
    if let Some(p) = values.iter().position(|v| !v.is_finite()) {
        return Err(UtilityError::NonFinite { customer: grid.customers[p / m].clone(), station: grid.stations[p % m].clone() });
    }
    Ok(UtilityMatrix {
        customers: grid.customers.clone(),
        stations: grid.stations.clone(),
        values,
        provenance: Provenance { spec, seed: cfg.seed, config_hash: hash_json(&(cfg, statistic)) },
    })
}

/// Mean over all fold-draw ratio utilities of MNL folds.
pub fn simulate_mnl_utilities(grid: &AttributeGrid, cfg: &SimulationConfig) -> Result<UtilityMatrix, UtilityError> {
    check_folds(cfg, ModelKind::Mnl)?;
    simulate(grid, cfg, Statistic::Mean, false, UtilitySpec::Mnl)
}

/// Mean (MXL-Mean) or percentile (MXL-25 at q = 0.25) over all fold-scenario
/// ratio utilities of MXL folds.
pub fn simulate_mxl_utilities(
    grid: &AttributeGrid,
    cfg: &SimulationConfig,
    statistic: Statistic,
) -> Result<UtilityMatrix, UtilityError> {
    check_folds(cfg, ModelKind::Mxl)?;
    let spec = match statistic {
        Statistic::Mean => UtilitySpec::MxlMean,
        Statistic::Percentile(_) => UtilitySpec::Mxl25,
    };
    simulate(grid, cfg, statistic, true, spec)
}

/// Utilities of any specification from the attribute grid.
pub fn utilities_for(spec: UtilitySpec, grid: &AttributeGrid, cfg: &SimulationConfig) -> Result<UtilityMatrix, UtilityError> {
    match spec {
        UtilitySpec::Distance => distance_utilities(grid.customers.clone(), grid.stations.clone(), &grid_distances(grid)),
        UtilitySpec::Mnl => simulate_mnl_utilities(grid, cfg),
        UtilitySpec::MxlMean => simulate_mxl_utilities(grid, cfg, Statistic::Mean),
        UtilitySpec::Mxl25 => simulate_mxl_utilities(grid, cfg, Statistic::Percentile(0.25)),
    }
}
