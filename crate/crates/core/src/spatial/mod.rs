//! Road-network distances, proximity flags, amenity densities and
//! time-aware station availability.

mod amenity;
mod encode;
pub mod io;
mod network;
mod station;

use thiserror::Error;

pub use amenity::{
    amenity_density, gas_flag, walk_home_flag, Amenity, AmenityArchive, AmenityCategory, AmenitySnapshot,
    DensityRule, YearMonth,
};
pub use encode::{build_choice_set, encode_sessions, AttributeVector, ChoiceSetBuilder, EncodeReport, EncodingConfig};
pub use network::{network_distance, network_distance_with_snap, DistanceField, Reach, RoadNetwork, DEFAULT_SNAP_RADIUS_M};
pub use station::{OutletEvent, OutletEventKind, StationSnapshot};

#[derive(Debug, Error)]
pub enum SpatialError {
    #[error("road network has no nodes")]
    EmptyNetwork,
    #[error("duplicate network node `{0}`")]
    DuplicateNode(String),
    #[error("unknown network node `{0}`")]
    UnknownNode(String),
    #[error("edge {a}-{b} has non-positive length {length_m}")]
    EdgeLength { a: String, b: String, length_m: f64 },
    #[error("unknown amenity category `{0}`")]
    UnknownCategory(String),
    #[error("malformed month `{0}` (expected YYYY-MM)")]
    BadMonth(String),
    #[error("no amenity snapshot for {0}")]
    MissingSnapshot(YearMonth),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
