//! The run configuration: one TOML file holding every threshold of the
//! pipeline. Missing keys take their defaults, so an empty file is valid.
//!
//! ```toml
//! [near]
//! threshold_km = 1.5
//!
//! [encoding]
//! walk_threshold_m = 400.0
//! gas_radius_m = 50.0
//!
//! [estimation]
//! folds = 5
//! draws = 1000
//!
//! [simulation]
//! percentile = 0.25
//!
//! [grid]
//! ps = [10, 25]
//! ```

use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accounts::{ClassifierConfig, ExclusionWindow};
use crate::artifact::hash_json;
use crate::choice::{ModelKind, NearRule, ParameterSet};
use crate::estimation::{CvMode, EstimationConfig, EstimationError};
use crate::experiments::ExperimentGrid;
use crate::geo::Polygon;
use crate::siting::CandidateGenConfig;
use crate::spatial::EncodingConfig;
use crate::synth::WorldConfig;
use crate::utility_sim::SimulationConfig;
use crate::Level;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error("config file {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionFilter {
    /// Accounts charging more often than this on one day at in-region
    /// stations are dropped.
    pub max_daily_sessions: usize,
}

impl Default for RegionFilter {
    fn default() -> Self {
        Self { max_daily_sessions: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSettings {
    pub draws_mnl: usize,
    pub draws_mxl: usize,
    /// Quantile of the MXL-25 specification.
    pub percentile: f64,
    /// Time at which station availability and amenities are read; the
    /// latest amenity snapshot when unset.
    pub reference_time: Option<DateTime<Utc>>,
    pub candidates: usize,
    pub candidate_spacing_m: f64,
    pub candidate_max_tries: usize,
    /// Outlets given to every generated candidate.
    pub candidate_outlets: u32,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            draws_mnl: 1000,
            draws_mxl: 2000,
            percentile: 0.25,
            reference_time: None,
            candidates: 200,
            candidate_spacing_m: 200.0,
            candidate_max_tries: 200_000,
            candidate_outlets: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SitingSettings {
    /// Largest candidate count solved with certified exact methods.
    pub exact_threshold: usize,
}

impl Default for SitingSettings {
    fn default() -> Self {
        Self { exact_threshold: 20 }
    }
}

/// The whole file. `seed` fields inside sections are overridden by the
/// run seed, and every `near` rule by the top-level `[near]` table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub near: NearRule,
    pub classifier: ClassifierConfig,
    pub exclusion_window: ExclusionWindow,
    pub region: RegionFilter,
    pub encoding: EncodingConfig,
    pub estimation: EstimationConfig,
    pub simulation: SimulationSettings,
    pub siting: SitingSettings,
    pub grid: ExperimentGrid,
    pub synth: WorldConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serialisable config")
    }

    /// Hash of the parsed configuration, independent of file formatting.
    pub fn hash(&self) -> String {
        hash_json(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if !(self.near.threshold_km >= 0.0) {
            return bad("near.threshold_km must be non-negative");
        }
        self.estimation.validate()?;
        let s = &self.simulation;
        if s.draws_mnl == 0 || s.draws_mxl == 0 {
            return bad("simulation draws must be positive");
        }
        if !(s.percentile > 0.0 && s.percentile <= 1.0) {
            return bad("simulation.percentile must lie in (0, 1]");
        }
        if !(s.candidate_spacing_m > 0.0) {
            return bad("simulation.candidate_spacing_m must be positive");
        }
        if self.grid.ps.contains(&0) {
            return bad("grid.ps must be positive");
        }
        Ok(())
    }

    /// Estimation settings for `level`: L2-style folds for level 2 and
    /// L3-style folds for level 3.
    pub fn estimation_for(&self, level: Level, seed: u64) -> EstimationConfig {
        let mode = match level {
            Level::L2 => CvMode::L2Style,
            Level::L3 => CvMode::L3Style,
        };
        EstimationConfig { mode, seed, near: self.near, ..self.estimation.clone() }
    }

    pub fn simulation_for(&self, folds: Vec<ParameterSet>, seed: u64) -> SimulationConfig {
        let mut cfg = SimulationConfig::new(folds, seed);
        cfg.draws_per_fold = match cfg.folds.first().map(|p| p.model_kind) {
            Some(ModelKind::Mxl) => self.simulation.draws_mxl,
            _ => self.simulation.draws_mnl,
        };
        cfg.near = self.near;
        cfg
    }

    pub fn candidates_for(&self, region: Polygon, seed: u64) -> CandidateGenConfig {
        CandidateGenConfig {
            count: self.simulation.candidates,
            min_spacing_m: self.simulation.candidate_spacing_m,
            max_tries: self.simulation.candidate_max_tries,
            ..CandidateGenConfig::new(region, seed)
        }
    }

    pub fn world_for(&self, seed: u64) -> WorldConfig {
        WorldConfig { seed, near: self.near, encoding: self.encoding.clone(), ..self.synth.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = Config::default();
        let back = Config::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = Config::from_toml(
            "[near]\nthreshold_km = 2.0\n[encoding]\nwalk_threshold_m = 300.0\n[grid]\nps = [5]\nspecs = [\"mnl\", \"mxl-25\"]\n",
        )
        .unwrap();
        assert_eq!(cfg.near.threshold_km, 2.0);
        assert!(cfg.near.inclusive);
        assert_eq!(cfg.encoding.walk_threshold_m, 300.0);
        assert_eq!(cfg.encoding.gas_radius_m, 50.0);
        assert_eq!(cfg.grid.ps, vec![5]);
        assert_eq!(cfg.grid.specs.len(), 2);
        assert_eq!(cfg.estimation_for(Level::L2, 9).near.threshold_km, 2.0);
        assert_eq!(cfg.estimation_for(Level::L2, 9).seed, 9);
        assert_ne!(cfg.hash(), Config::default().hash());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(Config::from_toml("[nearr]\n"), Err(ConfigError::Parse(_))));
        assert!(matches!(Config::from_toml("[simulation]\npercentile = 0.0\n"), Err(ConfigError::Invalid(_))));
        assert!(Config::from_toml("[estimation]\noutlier_quantile = 1.0\n").is_err());
    }

    #[test]
    fn draw_counts_follow_model_kind() {
        let cfg = Config::from_toml("[simulation]\ndraws_mnl = 7\ndraws_mxl = 9\n").unwrap();
        let mnl = ParameterSet::mnl([1.0; crate::choice::K]);
        let mxl = ParameterSet::mxl([1.0; crate::choice::K], [0.1; crate::choice::K]);
        assert_eq!(cfg.simulation_for(vec![mnl], 0).draws_per_fold, 7);
        assert_eq!(cfg.simulation_for(vec![mxl], 0).draws_per_fold, 9);
    }
}
