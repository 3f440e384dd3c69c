//! Attribute encoding of a user's choice set at a point in time.

use std::collections::HashMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::amenity::{gas_flag, walk_home_flag, AmenityArchive, AmenityCategory, DensityRule, YearMonth};
use super::network::{DistanceField, Reach, RoadNetwork, DEFAULT_SNAP_RADIUS_M};
use super::station::StationSnapshot;
use super::SpatialError;
use crate::accounts::{Account, ExclusionWindow};
use crate::choice::ChoiceObservation;
use crate::geo::LatLon;
use crate::Level;

/// Attributes of one user-station pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector {
    pub dist_km: f64,
    pub is_walk_home: u8,
    pub outlets: u32,
    pub is_gas: u8,
    pub rest: f64,
    pub ff: f64,
    pub shop: f64,
    pub sm: f64,
    pub mall: f64,
    pub leis: f64,
    pub sport: f64,
}

impl AttributeVector {
    pub fn densities_non_negative(&self) -> bool {
        [self.rest, self.ff, self.shop, self.sm, self.mall, self.leis, self.sport].iter().all(|&d| d >= 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodingConfig {
    pub walk_threshold_m: f64,
    pub gas_radius_m: f64,
    pub amenity_radius_l2_m: f64,
    pub amenity_radius_l3_m: f64,
    pub density: DensityRule,
    pub snap_radius_m: f64,
    /// Operators whose stations never enter a choice set.
    pub excluded_operators: Vec<String>,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            walk_threshold_m: 400.0,
            gas_radius_m: 50.0,
            amenity_radius_l2_m: 300.0,
            amenity_radius_l3_m: 200.0,
            density: DensityRule::Log1p,
            snap_radius_m: DEFAULT_SNAP_RADIUS_M,
            excluded_operators: vec!["ChargePoint".into()],
        }
    }
}

impl EncodingConfig {
    pub fn amenity_radius_m(&self, level: Level) -> f64 {
        match level {
            Level::L2 => self.amenity_radius_l2_m,
            Level::L3 => self.amenity_radius_l3_m,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct StationFeatures {
    is_gas: u8,
    // restaurant, fast food, shop, supermarket, mall, leisure, sport
    densities: [f64; 7],
}

const DENSITY_CATEGORIES: [AmenityCategory; 7] = [
    AmenityCategory::Restaurant,
    AmenityCategory::FastFood,
    AmenityCategory::Shop,
    AmenityCategory::Supermarket,
    AmenityCategory::Mall,
    AmenityCategory::Leisure,
    AmenityCategory::Sport,
];

/// Precomputes station-level amenity features for every snapshot month so
/// that many choice sets can be encoded cheaply.
pub struct ChoiceSetBuilder<'a> {
    stations: Vec<&'a StationSnapshot>,
    features: HashMap<(usize, YearMonth), StationFeatures>,
    level: Level,
    cfg: EncodingConfig,
}

impl<'a> ChoiceSetBuilder<'a> {
    pub fn new(stations: &'a [StationSnapshot], archive: &AmenityArchive, level: Level, cfg: &EncodingConfig) -> Self {
        let stations: Vec<&StationSnapshot> = stations
            .iter()
            .filter(|s| s.level == level && !cfg.excluded_operators.iter().any(|o| o == &s.operator))
            .collect();
        let radius = cfg.amenity_radius_m(level);
        let mut features = HashMap::new();
        for (month, snap) in &archive.snapshots {
            for (i, s) in stations.iter().enumerate() {
                let mut f = StationFeatures { is_gas: gas_flag(snap, s.pos, cfg.gas_radius_m), ..Default::default() };
                for (slot, cat) in f.densities.iter_mut().zip(DENSITY_CATEGORIES) {
                    *slot = cfg.density.apply(snap.count_within(s.pos, cat, radius));
                }
                features.insert((i, *month), f);
            }
        }
        Self { stations, features, level, cfg: cfg.clone() }
    }

    pub fn level(&self) -> Level {
        self.level
    }

    /// Stations of the builder's level with at least one installed outlet at
    /// `at` and a road path from `home`, in input order.
    pub fn build(
        &self,
        net: &RoadNetwork,
        home: LatLon,
        at: DateTime<Utc>,
    ) -> Result<Vec<(String, AttributeVector)>, SpatialError> {
        let field = net.distance_field(home, self.cfg.snap_radius_m)?;
        self.build_from(&field, home, at)
    }

    /// As [`build`](Self::build) with precomputed distances from `home`.
    pub fn build_from(
        &self,
        field: &DistanceField<'_>,
        home: LatLon,
        at: DateTime<Utc>,
    ) -> Result<Vec<(String, AttributeVector)>, SpatialError> {
        let month = YearMonth::of(at);
        let mut out = Vec::new();
        for (i, s) in self.stations.iter().enumerate() {
            let outlets = s.outlets_at(at);
            if outlets == 0 {
                continue;
            }
            let Reach::Km(dist_km) = field.to(s.pos) else { continue };
            let f = self.features.get(&(i, month)).ok_or(SpatialError::MissingSnapshot(month))?;
            let [rest, ff, shop, sm, mall, leis, sport] = f.densities;
            out.push((
                s.station_id.clone(),
                AttributeVector {
                    dist_km,
                    is_walk_home: walk_home_flag(home, s.pos, self.cfg.walk_threshold_m),
                    outlets,
                    is_gas: f.is_gas,
                    rest,
                    ff,
                    shop,
                    sm,
                    mall,
                    leis,
                    sport,
                },
            ));
        }
        Ok(out)
    }
}

/// One-shot choice-set construction; see [`ChoiceSetBuilder`] for repeated use.
pub fn build_choice_set(
    stations: &[StationSnapshot],
    net: &RoadNetwork,
    home: LatLon,
    at: DateTime<Utc>,
    level: Level,
    archive: &AmenityArchive,
    cfg: &EncodingConfig,
) -> Result<Vec<(String, AttributeVector)>, SpatialError> {
    archive.for_time(at)?;
    ChoiceSetBuilder::new(stations, archive, level, cfg).build(net, home, at)
}

/// Counts of sessions seen by [`encode_sessions`] and why any were dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeReport {
    pub accounts: usize,
    pub sessions: usize,
    pub other_level: usize,
    pub in_window: usize,
    pub no_home: usize,
    /// The charged station was not in the encoded choice set (closed,
    /// excluded operator or unreachable).
    pub chosen_unavailable: usize,
    pub encoded: usize,
}

/// One observation per session of `level`: the choice set at the session
/// start from the account's postal centroid, with the charged station as
/// the choice. Sessions inside `window` are skipped.
pub fn encode_sessions<'a>(
    accounts: impl IntoIterator<Item = &'a Account>,
    builder: &ChoiceSetBuilder<'_>,
    net: &RoadNetwork,
    window: Option<&ExclusionWindow>,
) -> Result<(Vec<ChoiceObservation>, EncodeReport), SpatialError> {
    let mut report = EncodeReport::default();
    let mut out = Vec::new();
    for acct in accounts {
        report.accounts += 1;
        let mut sessions: Vec<_> = acct.sessions.iter().collect();
        sessions.sort_by(|a, b| (a.start, &a.session_id).cmp(&(b.start, &b.session_id)));
        report.sessions += sessions.len();
        let Some(home) = acct.postal_centroid else {
            report.no_home += sessions.len();
            continue;
        };
        let mut field = None;
        for s in sessions {
            if s.level != builder.level() {
                report.other_level += 1;
                continue;
            }
            if window.is_some_and(|w| w.contains(s.start)) {
                report.in_window += 1;
                continue;
            }
            if field.is_none() {
                field = Some(net.distance_field(home, builder.cfg.snap_radius_m)?);
            }
            let set = builder.build_from(field.as_ref().expect("field computed"), home, s.start)?;
            let Some(chosen_index) = set.iter().position(|(id, _)| *id == s.station_id) else {
                report.chosen_unavailable += 1;
                continue;
            };
            let (station_ids, alternatives) = set.into_iter().unzip();
            out.push(ChoiceObservation {
                user_id: acct.account_id.clone(),
                timestamp: s.start,
                chosen_index,
                alternatives,
                station_ids,
            });
            report.encoded += 1;
        }
    }
    Ok((out, report))
}
