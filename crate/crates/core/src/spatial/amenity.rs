//! Monthly amenity snapshots and the density / gas-station features derived
//! from them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, Utc};
use serde::{Deserialize, Serialize};

use super::SpatialError;
use crate::geo::{haversine_m, LatLon};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmenityCategory {
    Restaurant,
    FastFood,
    Shop,
    Supermarket,
    Mall,
    Leisure,
    Sport,
    Gas,
}

impl AmenityCategory {
    pub const ALL: [AmenityCategory; 8] = [
        AmenityCategory::Restaurant,
        AmenityCategory::FastFood,
        AmenityCategory::Shop,
        AmenityCategory::Supermarket,
        AmenityCategory::Mall,
        AmenityCategory::Leisure,
        AmenityCategory::Sport,
        AmenityCategory::Gas,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AmenityCategory::Restaurant => "restaurant",
            AmenityCategory::FastFood => "fast_food",
            AmenityCategory::Shop => "shop",
            AmenityCategory::Supermarket => "supermarket",
            AmenityCategory::Mall => "mall",
            AmenityCategory::Leisure => "leisure",
            AmenityCategory::Sport => "sport",
            AmenityCategory::Gas => "gas",
        }
    }
}

impl fmt::Display for AmenityCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AmenityCategory {
    type Err = SpatialError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim())
            .ok_or_else(|| SpatialError::UnknownCategory(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Self {
        Self { year, month }
    }

    pub fn of(t: DateTime<Utc>) -> Self {
        Self::new(t.year(), t.month())
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = SpatialError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SpatialError::BadMonth(s.to_string());
        let (y, m) = s.trim().split_once('-').ok_or_else(bad)?;
        let year = y.parse().map_err(|_| bad())?;
        let month: u32 = m.parse().map_err(|_| bad())?;
        if !(1..=12).contains(&month) {
            return Err(bad());
        }
        Ok(Self::new(year, month))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Amenity {
    pub category: AmenityCategory,
    pub pos: LatLon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmenitySnapshot {
    pub month: YearMonth,
    pub amenities: Vec<Amenity>,
}

/// How a raw amenity count becomes a density feature.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityRule {
    /// `ln(1 + n)`
    #[default]
    Log1p,
    /// `ln(n)`, or 0 when there is no amenity.
    LogOrZero,
}

impl DensityRule {
    pub fn apply(self, count: usize) -> f64 {
        match self {
            DensityRule::Log1p => (count as f64).ln_1p(),
            DensityRule::LogOrZero if count == 0 => 0.0,
            DensityRule::LogOrZero => (count as f64).ln(),
        }
    }
}

impl AmenitySnapshot {
    pub fn count_within(&self, at: LatLon, category: AmenityCategory, radius_m: f64) -> usize {
        self.amenities
            .iter()
            .filter(|a| a.category == category && haversine_m(at, a.pos) <= radius_m)
            .count()
    }
}

pub fn amenity_density(
    snapshot: &AmenitySnapshot,
    station: LatLon,
    category: AmenityCategory,
    radius_m: f64,
    rule: DensityRule,
) -> f64 {
    rule.apply(snapshot.count_within(station, category, radius_m))
}

/// 1 when a gas station lies within `radius_m` of the charging station.
pub fn gas_flag(snapshot: &AmenitySnapshot, station: LatLon, radius_m: f64) -> u8 {
    u8::from(snapshot.count_within(station, AmenityCategory::Gas, radius_m) > 0)
}

/// 1 when the great-circle distance is strictly below `threshold_m`.
pub fn walk_home_flag(home: LatLon, station: LatLon, threshold_m: f64) -> u8 {
    u8::from(haversine_m(home, station) < threshold_m)
}

/// All monthly snapshots, keyed by month.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AmenityArchive {
    pub snapshots: BTreeMap<YearMonth, AmenitySnapshot>,
}

impl AmenityArchive {
    pub fn insert(&mut self, snapshot: AmenitySnapshot) {
        self.snapshots.insert(snapshot.month, snapshot);
    }

    pub fn for_time(&self, t: DateTime<Utc>) -> Result<&AmenitySnapshot, SpatialError> {
        let month = YearMonth::of(t);
        self.snapshots.get(&month).ok_or(SpatialError::MissingSnapshot(month))
    }
}
