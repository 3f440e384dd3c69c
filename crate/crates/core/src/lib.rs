//! Station-choice modelling for public EV charging networks.
//!
//! The crate covers the full chain from raw charging sessions to network
//! design: account classification ([`accounts`]), spatial attribute encoding
//! ([`spatial`]), multinomial and panel mixed logit likelihoods ([`choice`]),
//! estimation with grouped cross-validation ([`estimation`]), fit indicators
//! ([`metrics`]), simulated customer-station utilities ([`utility_sim`]),
//! p-median and max-min siting ([`siting`]) and the cross-specification
//! comparison harness ([`experiments`]). [`synth`] generates synthetic worlds
//! with known parameters for testing the whole chain.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub mod accounts;
pub mod artifact;
pub mod choice;
pub mod config;
pub mod estimation;
pub mod experiments;
pub mod geo;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod siting;
pub mod spatial;
pub mod stats;
pub mod synth;
pub mod utility_sim;

/// Charging level of a session, outlet or station.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    L2,
    L3,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::L2 => "L2",
            Level::L3 => "L3",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown charging level `{0}` (expected L2 or L3)")]
pub struct ParseLevelError(String);

impl FromStr for Level {
    type Err = ParseLevelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "L2" | "l2" | "2" => Ok(Level::L2),
            "L3" | "l3" | "3" => Ok(Level::L3),
            other => Err(ParseLevelError(other.to_string())),
        }
    }
}
