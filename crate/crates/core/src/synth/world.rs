//! A small synthetic city: road grid, charging stations with outlet
//! histories, monthly amenity snapshots, member accounts with sessions and
//! census-style customer points. Private users choose stations by the same
//! encoding the pipeline uses, so encoding their sessions recovers exactly
//! the generated choices.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Months, TimeZone, Utc};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ObsPerUser;
use crate::accounts::{write_accounts, write_sessions, Account, IngestError, RawSession};
use crate::choice::{observable_utility, ChoiceObservation, ModelKind, NearRule, ParameterSet, K};
use crate::geo::{haversine_m, LatLon, Polygon};
use crate::rng;
use crate::siting::{write_customers, Customer, SitingError};
use crate::spatial::io::{save_amenity_archive, write_network, write_stations};
use crate::spatial::{
    Amenity, AmenityArchive, AmenityCategory, AmenitySnapshot, ChoiceSetBuilder, EncodingConfig, OutletEvent,
    OutletEventKind, RoadNetwork, SpatialError, StationSnapshot, YearMonth,
};
use crate::Level;

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Siting(#[from] SitingError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    /// South-west corner of the square region.
    pub origin: LatLon,
    pub size_km: f64,
    pub grid_spacing_m: f64,
    pub l2_stations: usize,
    pub l3_stations: usize,
    /// Extra L2 stations run by an operator the encoder excludes.
    pub excluded_stations: usize,
    pub excluded_operator: String,
    pub private_users: usize,
    pub sessions_per_user: ObsPerUser,
    /// Probability that a session is at level 3.
    pub l3_share: f64,
    pub start: DateTime<Utc>,
    pub months: u32,
    pub customers_per_side: usize,
    pub truth: ParameterSet,
    /// Adds shared, rental, unplugged and out-of-region accounts.
    pub decoys: bool,
    pub encoding: EncodingConfig,
    pub near: NearRule,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let mut mu = [0.0; K];
        // distNear, outletsNear, isWalkHome, distFar, outletsFar, isGas, leis, sport, sm, shop, mall, rest, ff
        mu.copy_from_slice(&[-0.6, 0.15, 1.0, -0.35, 0.12, -0.3, 0.1, 0.05, 0.2, -0.05, 0.3, 0.15, -0.1]);
        Self {
            seed: 0,
            origin: LatLon::new(45.45, -73.70),
            size_km: 8.0,
            grid_spacing_m: 500.0,
            l2_stations: 20,
            l3_stations: 6,
            excluded_stations: 2,
            excluded_operator: "ChargePoint".into(),
            private_users: 150,
            sessions_per_user: ObsPerUser::Uniform { min: 3, max: 8 },
            l3_share: 0.25,
            start: Utc.with_ymd_and_hms(2021, 7, 1, 0, 0, 0).unwrap(),
            months: 6,
            customers_per_side: 6,
            truth: ParameterSet::mnl(mu),
            decoys: true,
            encoding: EncodingConfig::default(),
            near: NearRule::default(),
        }
    }
}

impl WorldConfig {
    pub fn region(&self) -> Polygon {
        let ne = self.origin.offset_m(self.size_km * 1000.0, self.size_km * 1000.0);
        Polygon::rectangle(self.origin.lat, self.origin.lon, ne.lat, ne.lon)
    }

    pub fn end(&self) -> DateTime<Utc> {
        self.start + Months::new(self.months)
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub region: Polygon,
    pub nodes: Vec<(String, LatLon)>,
    pub edges: Vec<(String, String, f64)>,
    pub net: RoadNetwork,
    pub stations: Vec<StationSnapshot>,
    pub archive: AmenityArchive,
    pub accounts: Vec<Account>,
    pub customers: Vec<Customer>,
    /// The choices generated for private users, per level.
    pub observations: BTreeMap<Level, Vec<ChoiceObservation>>,
}

/// Paths written by [`write_world`], relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldFiles {
    pub accounts: PathBuf,
    pub sessions: PathBuf,
    pub nodes: PathBuf,
    pub network: PathBuf,
    pub stations: PathBuf,
    pub amenities: PathBuf,
    pub customers: PathBuf,
    pub region: PathBuf,
    pub truth: PathBuf,
}

impl Default for WorldFiles {
    fn default() -> Self {
        Self {
            accounts: "accounts.csv".into(),
            sessions: "sessions.csv".into(),
            nodes: "nodes.csv".into(),
            network: "network.csv".into(),
            stations: "stations.geojson".into(),
            amenities: "amenities".into(),
            customers: "customers.csv".into(),
            region: "region.json".into(),
            truth: "truth.txt".into(),
        }
    }
}

fn uniform_point<R: Rng>(r: &mut R, origin: LatLon, size_m: f64) -> LatLon {
    origin.offset_m(r.random_range(0.0..size_m), r.random_range(0.0..size_m))
}

fn road_grid(cfg: &WorldConfig) -> Result<(Vec<(String, LatLon)>, Vec<(String, String, f64)>, RoadNetwork), SpatialError> {
    let mut r = rng::stream(cfg.seed, &[0x6E7]);
    let n = (cfg.size_km * 1000.0 / cfg.grid_spacing_m).round() as usize + 1;
    let id = |a: usize, b: usize| format!("n{a:02}_{b:02}");
    let jitter = 0.1 * cfg.grid_spacing_m;
    let mut nodes = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            let north = (a as f64 * cfg.grid_spacing_m + r.random_range(-jitter..jitter)).max(0.0);
            let east = (b as f64 * cfg.grid_spacing_m + r.random_range(-jitter..jitter)).max(0.0);
            nodes.push((id(a, b), cfg.origin.offset_m(north, east)));
        }
    }
    let pos: BTreeMap<&str, LatLon> = nodes.iter().map(|(k, p)| (k.as_str(), *p)).collect();
    let mut edges = Vec::new();
    for a in 0..n {
        for b in 0..n {
            for (c, d) in [(a + 1, b), (a, b + 1)] {
                if c < n && d < n {
                    let (u, v) = (id(a, b), id(c, d));
                    // roads are a little longer than the straight line
                    let len = (haversine_m(pos[u.as_str()], pos[v.as_str()]) * r.random_range(1.0..1.25) * 10.0).round() / 10.0;
                    edges.push((u, v, len));
                }
            }
        }
    }
    let mut net = RoadNetwork::new();
    for (k, p) in &nodes {
        net.add_node(k.clone(), *p)?;
    }
    for (a, b, len) in &edges {
        net.add_edge(a, b, *len)?;
    }
    Ok((nodes, edges, net))
}

fn stations(cfg: &WorldConfig) -> Vec<StationSnapshot> {
    let mut r = rng::stream(cfg.seed, &[0x57A]);
    let size_m = cfg.size_km * 1000.0;
    let period_days = (cfg.end() - cfg.start).num_days().max(1);
    let operators = ["Circuit", "FLO"];
    let mut out = Vec::new();
    let plan = [(Level::L2, cfg.l2_stations, 4u32, false), (Level::L3, cfg.l3_stations, 2, false), (Level::L2, cfg.excluded_stations, 2, true)];
    for (level, count, max_outlets, excluded) in plan {
        for _ in 0..count {
            let k = out.len();
            let mut s = StationSnapshot::new(format!("st{k:03}"), uniform_point(&mut r, cfg.origin, size_m), level);
            s.operator = if excluded { cfg.excluded_operator.clone() } else { operators[k % 2].to_string() };
            let outlets = r.random_range(1..=max_outlets);
            // most stations predate the study period; some open during it
            let opens_late = r.random_bool(0.15);
            for _ in 0..outlets {
                let at = if opens_late {
                    cfg.start + Duration::days(r.random_range(1..period_days))
                } else {
                    cfg.start - Duration::days(r.random_range(30..400))
                };
                s.outlet_events.push(OutletEvent { at, kind: OutletEventKind::Install });
            }
            if outlets > 1 && r.random_bool(0.2) {
                let at = cfg.start + Duration::days(r.random_range(1..period_days));
                s.outlet_events.push(OutletEvent { at, kind: OutletEventKind::Close });
            }
            s.outlet_events.sort_by_key(|e| e.at);
            out.push(s);
        }
    }
    // one station shuts down part way through
    if let Some(s) = out.iter_mut().find(|s| s.level == Level::L2 && s.operator != cfg.excluded_operator) {
        s.closed = Some(cfg.start + Duration::days(period_days * 2 / 3));
    }
    out
}

fn amenity_archive(cfg: &WorldConfig, stations: &[StationSnapshot]) -> AmenityArchive {
    let size_m = cfg.size_km * 1000.0;
    let counts = [
        (AmenityCategory::Restaurant, 140),
        (AmenityCategory::FastFood, 60),
        (AmenityCategory::Shop, 160),
        (AmenityCategory::Supermarket, 25),
        (AmenityCategory::Mall, 6),
        (AmenityCategory::Leisure, 70),
        (AmenityCategory::Sport, 35),
        (AmenityCategory::Gas, 20),
    ];
    let mut r = rng::stream(cfg.seed, &[0xA3E]);
    let mut base: Vec<Amenity> = Vec::new();
    for (category, n) in counts {
        for _ in 0..n {
            // half cluster around stations, half spread over the region
            let pos = if !stations.is_empty() && r.random_bool(0.5) {
                let s = &stations[r.random_range(0..stations.len())];
                s.pos.offset_m(r.random_range(-350.0..350.0), r.random_range(-350.0..350.0))
            } else {
                uniform_point(&mut r, cfg.origin, size_m)
            };
            base.push(Amenity { category, pos });
        }
    }
    for s in stations {
        if !r.random_bool(0.25) {
            continue;
        }
        base.push(Amenity { category: AmenityCategory::Gas, pos: s.pos.offset_m(r.random_range(-30.0..30.0), 0.0) });
    }
    let mut archive = AmenityArchive::default();
    let mut month = cfg.start;
    for m in 0..cfg.months {
        // a few openings each month
        let mut r = rng::stream(cfg.seed, &[0xA3E, m as u64 + 1]);
        for _ in 0..4 {
            let (category, _) = counts[r.random_range(0..counts.len() - 1)];
            base.push(Amenity { category, pos: uniform_point(&mut r, cfg.origin, size_m) });
        }
        archive.insert(AmenitySnapshot { month: YearMonth::of(month), amenities: base.clone() });
        month = month + Months::new(1);
    }
    archive
}

fn customers(cfg: &WorldConfig) -> Vec<Customer> {
    let n = cfg.customers_per_side.max(1);
    let step = cfg.size_km * 1000.0 / n as f64;
    let mut out = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            out.push(Customer {
                customer_id: format!("da{:03}", out.len()),
                pos: cfg.origin.offset_m((a as f64 + 0.5) * step, (b as f64 + 0.5) * step),
                weight: 1.0,
            });
        }
    }
    out
}

fn session_times<R: Rng>(r: &mut R, cfg: &WorldConfig, n: usize) -> Vec<DateTime<Utc>> {
    let days = (cfg.end() - cfg.start).num_days().max(1) as usize;
    let n = n.min(days);
    let picked = rand::seq::index::sample(r, days, n);
    let mut out: Vec<DateTime<Utc>> = picked
        .iter()
        .map(|d| cfg.start + Duration::days(d as i64) + Duration::minutes(r.random_range(7 * 60..21 * 60)))
        .collect();
    out.sort();
    out
}

fn session_for<R: Rng>(r: &mut R, account: &str, k: usize, station: &StationSnapshot, start: DateTime<Utc>) -> RawSession {
    let (minutes, energy) = match station.level {
        Level::L2 => (r.random_range(60..300), r.random_range(5.0..25.0)),
        Level::L3 => (r.random_range(20..60), r.random_range(15.0..40.0)),
    };
    let outlets = station.outlets_at(start).max(1);
    RawSession {
        session_id: format!("{account}-{k:03}"),
        account_id: account.into(),
        outlet_id: format!("{}-o{}", station.station_id, r.random_range(0..outlets)),
        station_id: station.station_id.clone(),
        start,
        end: start + Duration::minutes(minutes),
        energy_kwh: (energy * 100.0f64).round() / 100.0,
        level: station.level,
        soc_start: None,
        soc_end: None,
    }
}

/// Generates the whole world from the config.
pub fn generate_world(cfg: &WorldConfig) -> Result<World, WorldError> {
    let region = cfg.region();
    let (nodes, edges, net) = road_grid(cfg)?;
    let stations = stations(cfg);
    let archive = amenity_archive(cfg, &stations);
    let builders: BTreeMap<Level, ChoiceSetBuilder> =
        [Level::L2, Level::L3].into_iter().map(|l| (l, ChoiceSetBuilder::new(&stations, &archive, l, &cfg.encoding))).collect();
    let size_m = cfg.size_km * 1000.0;
    let by_id: BTreeMap<&str, &StationSnapshot> = stations.iter().map(|s| (s.station_id.as_str(), s)).collect();

    let mut accounts = Vec::new();
    let mut observations: BTreeMap<Level, Vec<ChoiceObservation>> = BTreeMap::new();
    for u in 0..cfg.private_users {
        let mut r = rng::stream(cfg.seed, &[0x05E, u as u64]);
        let id = format!("u{u:04}");
        let home = uniform_point(&mut r, cfg.origin, size_m);
        let beta: [f64; K] = match cfg.truth.model_kind {
            ModelKind::Mnl => cfg.truth.mu,
            ModelKind::Mxl => {
                let mut b = cfg.truth.mu;
                for k in 0..K {
                    let e: f64 = StandardNormal.sample(&mut r);
                    b[k] += cfg.truth.sigma[k] * e;
                }
                b
            }
        };
        let n = match cfg.sessions_per_user {
            ObsPerUser::Fixed(n) => n,
            ObsPerUser::Uniform { min, max } => r.random_range(min..=max),
        };
        let mut acct = Account::new(id.clone(), cfg.start - Duration::days(r.random_range(60..720)));
        acct.postal_centroid = Some(home);
        let field = net.distance_field(home, cfg.encoding.snap_radius_m)?;
        for t in session_times(&mut r, cfg, n) {
            let level = if r.random_bool(cfg.l3_share) { Level::L3 } else { Level::L2 };
            let set = builders[&level].build_from(&field, home, t)?;
            if set.is_empty() {
                continue;
            }
            let mut best = (f64::NEG_INFINITY, 0);
            for (j, (_, x)) in set.iter().enumerate() {
                let u = observable_utility(x, &beta, cfg.near) + rng::gumbel(&mut r);
                if u > best.0 {
                    best = (u, j);
                }
            }
            let station = by_id[set[best.1].0.as_str()];
            let k = acct.sessions.len();
            acct.sessions.push(session_for(&mut r, &id, k, station, t));
            let (station_ids, alternatives) = set.into_iter().unzip();
            observations.entry(level).or_default().push(ChoiceObservation {
                user_id: id.clone(),
                timestamp: t,
                chosen_index: best.1,
                alternatives,
                station_ids,
            });
        }
        accounts.push(acct);
    }
    if cfg.decoys {
        accounts.extend(decoys(cfg, &stations));
    }
    Ok(World { config: cfg.clone(), region, nodes, edges, net, stations, archive, accounts, customers: customers(cfg), observations })
}

/// Accounts each caught by one filter: shared (daily count and overlap),
/// rental, unplugged, window-only and out-of-region.
fn decoys(cfg: &WorldConfig, stations: &[StationSnapshot]) -> Vec<Account> {
    let mut r = rng::stream(cfg.seed, &[0xDEC]);
    let usable: Vec<&StationSnapshot> =
        stations.iter().filter(|s| s.operator != cfg.excluded_operator && s.closed.is_none()).collect();
    let pick = |r: &mut rand_chacha::ChaCha8Rng| usable[r.random_range(0..usable.len())];
    let day = cfg.start + Duration::days(20) + Duration::hours(6);
    let old = cfg.start - Duration::days(365);
    let size_m = cfg.size_km * 1000.0;
    let home = |r: &mut rand_chacha::ChaCha8Rng| Some(uniform_point(r, cfg.origin, size_m));
    let mut out = Vec::new();

    let mut a = Account::new("shared-daily", old);
    a.postal_centroid = home(&mut r);
    for k in 0..4 {
        let s = pick(&mut r);
        a.sessions.push(session_for(&mut r, "shared-daily", k, s, day + Duration::hours(3 * k as i64)));
    }
    out.push(a);

    let mut a = Account::new("shared-overlap", old);
    a.postal_centroid = home(&mut r);
    for k in 0..2 {
        let s = pick(&mut r);
        let mut sess = session_for(&mut r, "shared-overlap", k, s, day + Duration::minutes(30 * k as i64));
        sess.end = sess.start + Duration::hours(2);
        a.sessions.push(sess);
    }
    out.push(a);

    let mut a = Account::new("rental", day);
    a.postal_centroid = home(&mut r);
    for k in 0..3 {
        let s = pick(&mut r);
        a.sessions.push(session_for(&mut r, "rental", k, s, day + Duration::days(2 * k as i64 + 1)));
    }
    out.push(a);

    let mut a = Account::new("unplugged", old);
    a.postal_centroid = home(&mut r);
    out.push(a);

    let mut a = Account::new("window-only", old);
    a.postal_centroid = home(&mut r);
    let s = pick(&mut r);
    a.sessions.push(session_for(&mut r, "window-only", 0, s, Utc.with_ymd_and_hms(2021, 3, 10, 12, 0, 0).unwrap()));
    out.push(a);

    let mut a = Account::new("outside", old);
    a.postal_centroid = Some(cfg.origin.offset_m(-20_000.0, -20_000.0));
    let s = pick(&mut r);
    a.sessions.push(session_for(&mut r, "outside", 0, s, day));
    out.push(a);
    out
}

/// Writes the world's input files under `dir`.
pub fn write_world(world: &World, dir: &Path) -> Result<WorldFiles, WorldError> {
    let files = WorldFiles::default();
    fs::create_dir_all(dir)?;
    let mut sessions: Vec<&RawSession> = world.accounts.iter().flat_map(|a| &a.sessions).collect();
    sessions.sort_by(|a, b| (a.start, &a.session_id).cmp(&(b.start, &b.session_id)));
    write_accounts(&world.accounts, fs::File::create(dir.join(&files.accounts))?)?;
    write_sessions(sessions, fs::File::create(dir.join(&files.sessions))?)?;
    write_network(&world.nodes, &world.edges, fs::File::create(dir.join(&files.nodes))?, fs::File::create(dir.join(&files.network))?)?;
    write_stations(&world.stations, fs::File::create(dir.join(&files.stations))?)?;
    save_amenity_archive(&world.archive, &dir.join(&files.amenities))?;
    write_customers(&world.customers, fs::File::create(dir.join(&files.customers))?)?;
    let mut region = serde_json::to_string_pretty(&world.region)?;
    region.push('\n');
    fs::write(dir.join(&files.region), region)?;
    fs::write(dir.join(&files.truth), world.config.truth.to_kv())?;
    Ok(files)
}
