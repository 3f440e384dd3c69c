//! Choice observations, panel datasets and their compiled design form.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::params::{Coef, K};
use super::ChoiceError;
use crate::spatial::AttributeVector;

/// Splits alternatives into the near-home and far-from-home utility branches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NearRule {
    pub threshold_km: f64,
    /// Whether a distance exactly at the threshold counts as near.
    pub inclusive: bool,
}

impl Default for NearRule {
    fn default() -> Self {
        Self { threshold_km: 1.5, inclusive: true }
    }
}

impl NearRule {
    pub fn new(threshold_km: f64) -> Self {
        Self { threshold_km, inclusive: true }
    }

    pub fn is_near(&self, dist_km: f64) -> bool {
        if self.inclusive {
            dist_km <= self.threshold_km
        } else {
            dist_km < self.threshold_km
        }
    }
}

/// The coefficient-aligned regressors of one alternative.
pub fn design_row(x: &AttributeVector, near: NearRule) -> [f64; K] {
    let mut z = [0.0; K];
    if near.is_near(x.dist_km) {
        z[Coef::DistNear.index()] = x.dist_km;
        z[Coef::OutletsNear.index()] = f64::from(x.outlets);
        z[Coef::IsWalkHome.index()] = f64::from(x.is_walk_home);
    } else {
        z[Coef::DistFar.index()] = x.dist_km;
        z[Coef::OutletsFar.index()] = f64::from(x.outlets);
        z[Coef::IsGas.index()] = f64::from(x.is_gas);
        z[Coef::Leis.index()] = x.leis;
        z[Coef::Sport.index()] = x.sport;
        z[Coef::Sm.index()] = x.sm;
        z[Coef::Shop.index()] = x.shop;
        z[Coef::Mall.index()] = x.mall;
        z[Coef::Rest.index()] = x.rest;
        z[Coef::Ff.index()] = x.ff;
    }
    z
}

/// Systematic utility of one alternative.
pub fn observable_utility(x: &AttributeVector, beta: &[f64; K], near: NearRule) -> f64 {
    dot(&design_row(x, near), beta)
}

#[inline]
pub(crate) fn dot(a: &[f64; K], b: &[f64; K]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceObservation {
    pub user_id: String,
    pub timestamp: DateTime<Utc>,
    pub chosen_index: usize,
    pub alternatives: Vec<AttributeVector>,
    /// Station ids aligned with `alternatives`; may be empty for synthetic data.
    #[serde(default)]
    pub station_ids: Vec<String>,
}

impl ChoiceObservation {
    pub fn chosen(&self) -> &AttributeVector {
        &self.alternatives[self.chosen_index]
    }

    pub fn validate(&self) -> Result<(), ChoiceError> {
        if self.alternatives.is_empty() {
            return Err(ChoiceError::EmptyChoiceSet(self.user_id.clone()));
        }
        if self.chosen_index >= self.alternatives.len() {
            return Err(ChoiceError::ChosenOutOfRange {
                user: self.user_id.clone(),
                chosen: self.chosen_index,
                m: self.alternatives.len(),
            });
        }
        if !self.station_ids.is_empty() && self.station_ids.len() != self.alternatives.len() {
            return Err(ChoiceError::Parse(format!("user {}: station ids misaligned", self.user_id)));
        }
        Ok(())
    }
}

/// Observations grouped by user, each user's list ordered by time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    pub users: BTreeMap<String, Vec<ChoiceObservation>>,
}

impl PanelDataset {
    pub fn from_observations(obs: impl IntoIterator<Item = ChoiceObservation>) -> Result<Self, ChoiceError> {
        let mut users: BTreeMap<String, Vec<ChoiceObservation>> = BTreeMap::new();
        for o in obs {
            o.validate()?;
            users.entry(o.user_id.clone()).or_default().push(o);
        }
        for list in users.values_mut() {
            list.sort_by_key(|o| o.timestamp);
        }
        Ok(Self { users })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_observations(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }

    pub fn observations(&self) -> impl Iterator<Item = &ChoiceObservation> {
        self.users.values().flatten()
    }

    pub fn counts(&self) -> Vec<(String, usize)> {
        self.users.iter().map(|(u, o)| (u.clone(), o.len())).collect()
    }

    /// The latest observation of every user.
    pub fn last_observations(&self) -> Vec<&ChoiceObservation> {
        self.users.values().filter_map(|o| o.last()).collect()
    }

    pub fn subset<'a>(&self, users: impl IntoIterator<Item = &'a String>) -> PanelDataset {
        PanelDataset {
            users: users.into_iter().filter_map(|u| self.users.get(u).map(|o| (u.clone(), o.clone()))).collect(),
        }
    }
}

/// One observation as dense coefficient-aligned rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsDesign {
    pub chosen: usize,
    pub rows: Vec<[f64; K]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserDesign {
    pub user_id: String,
    pub obs: Vec<ObsDesign>,
}

/// A panel compiled against a near/far rule, ready for likelihood evaluation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DesignPanel {
    pub users: Vec<UserDesign>,
}

impl DesignPanel {
    pub fn encode(data: &PanelDataset, near: NearRule) -> Self {
        let users = data
            .users
            .iter()
            .map(|(u, obs)| UserDesign {
                user_id: u.clone(),
                obs: obs
                    .iter()
                    .map(|o| ObsDesign {
                        chosen: o.chosen_index,
                        rows: o.alternatives.iter().map(|x| design_row(x, near)).collect(),
                    })
                    .collect(),
            })
            .collect();
        Self { users }
    }

    pub fn n_observations(&self) -> usize {
        self.users.iter().map(|u| u.obs.len()).sum()
    }

    /// Coefficients whose regressor never varies within any choice set; such
    /// coefficients do not enter any choice probability.
    pub fn non_identified(&self) -> Vec<usize> {
        (0..K)
            .filter(|&k| {
                self.users.iter().flat_map(|u| &u.obs).all(|o| {
                    let first = o.rows[0][k];
                    o.rows.iter().all(|r| r[k] == first)
                })
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// observations.csv: one row per alternative.

#[derive(Debug, Serialize, Deserialize)]
struct ObsRow {
    user_id: String,
    obs_index: usize,
    timestamp: DateTime<Utc>,
    station_id: String,
    chosen: u8,
    dist_km: f64,
    is_walk_home: u8,
    outlets: u32,
    is_gas: u8,
    rest: f64,
    ff: f64,
    shop: f64,
    sm: f64,
    mall: f64,
    leis: f64,
    sport: f64,
}

pub fn write_observations<W: Write>(data: &PanelDataset, out: W) -> Result<(), ChoiceError> {
    let mut w = csv::Writer::from_writer(out);
    for (user, obs) in &data.users {
        for (i, o) in obs.iter().enumerate() {
            for (j, x) in o.alternatives.iter().enumerate() {
                let station_id = o.station_ids.get(j).cloned().unwrap_or_else(|| format!("alt{j}"));
                w.serialize(ObsRow {
                    user_id: user.clone(),
                    obs_index: i,
                    timestamp: o.timestamp,
                    station_id,
                    chosen: u8::from(j == o.chosen_index),
                    dist_km: x.dist_km,
                    is_walk_home: x.is_walk_home,
                    outlets: x.outlets,
                    is_gas: x.is_gas,
                    rest: x.rest,
                    ff: x.ff,
                    shop: x.shop,
                    sm: x.sm,
                    mall: x.mall,
                    leis: x.leis,
                    sport: x.sport,
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_observations<R: Read>(reader: R) -> Result<PanelDataset, ChoiceError> {
    let mut groups: BTreeMap<(String, usize), ChoiceObservation> = BTreeMap::new();
    let mut chosen_count: BTreeMap<(String, usize), usize> = BTreeMap::new();
    for row in csv::Reader::from_reader(reader).deserialize() {
        let r: ObsRow = row?;
        let key = (r.user_id.clone(), r.obs_index);
        let o = groups.entry(key.clone()).or_insert_with(|| ChoiceObservation {
            user_id: r.user_id.clone(),
            timestamp: r.timestamp,
            chosen_index: usize::MAX,
            alternatives: Vec::new(),
            station_ids: Vec::new(),
        });
        if r.chosen == 1 {
            o.chosen_index = o.alternatives.len();
            *chosen_count.entry(key).or_default() += 1;
        }
        o.station_ids.push(r.station_id);
        o.alternatives.push(AttributeVector {
            dist_km: r.dist_km,
            is_walk_home: r.is_walk_home,
            outlets: r.outlets,
            is_gas: r.is_gas,
            rest: r.rest,
            ff: r.ff,
            shop: r.shop,
            sm: r.sm,
            mall: r.mall,
            leis: r.leis,
            sport: r.sport,
        });
    }
    if let Some(((u, i), _)) = groups.iter().find(|(k, _)| chosen_count.get(*k) != Some(&1)) {
        return Err(ChoiceError::Parse(format!("user {u} observation {i} must have exactly one chosen row")));
    }
    PanelDataset::from_observations(groups.into_values())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn attrs(dist: f64) -> AttributeVector {
        AttributeVector { dist_km: dist, is_walk_home: 1, outlets: 2, is_gas: 1, rest: 0.5, ..Default::default() }
    }

    #[test]
    fn near_branch_arithmetic() {
        let mut beta = [0.0; K];
        beta[Coef::DistNear.index()] = -0.2;
        beta[Coef::OutletsNear.index()] = 0.08;
        beta[Coef::IsWalkHome.index()] = 1.0;
        beta[Coef::IsGas.index()] = 5.0;
        let v = observable_utility(&attrs(1.0), &beta, NearRule::default());
        assert!((v - 0.96).abs() < 1e-12);
    }

    #[test]
    fn far_branch_ignores_walk_flag() {
        let mut beta = [0.0; K];
        beta[Coef::IsWalkHome.index()] = 100.0;
        beta[Coef::DistFar.index()] = -0.1;
        let z = design_row(&attrs(2.0), NearRule::default());
        assert_eq!(z[Coef::IsWalkHome.index()], 0.0);
        assert_eq!(z[Coef::IsGas.index()], 1.0);
        assert!((observable_utility(&attrs(2.0), &beta, NearRule::default()) + 0.2).abs() < 1e-12);
    }

    #[test]
    fn all_zero_far_attributes_give_zero_utility() {
        let far = AttributeVector { dist_km: 0.0, ..Default::default() };
        let strict = NearRule { threshold_km: 0.0, inclusive: false };
        assert_eq!(observable_utility(&far, &[1.7; K], strict), 0.0);
    }

    #[test]
    fn threshold_boundary_is_configurable() {
        let x = attrs(1.5);
        assert_eq!(design_row(&x, NearRule::default())[Coef::DistNear.index()], 1.5);
        let strict = NearRule { threshold_km: 1.5, inclusive: false };
        assert_eq!(design_row(&x, strict)[Coef::DistFar.index()], 1.5);
    }

    #[test]
    fn observations_csv_round_trip() {
        let t = Utc.with_ymd_and_hms(2019, 1, 1, 0, 0, 0).unwrap();
        let obs = vec![
            ChoiceObservation { user_id: "u1".into(), timestamp: t, chosen_index: 1, alternatives: vec![attrs(1.0), attrs(3.0)], station_ids: vec!["a".into(), "b".into()] },
            ChoiceObservation { user_id: "u1".into(), timestamp: t + chrono::Duration::days(1), chosen_index: 0, alternatives: vec![attrs(2.0)], station_ids: vec!["a".into()] },
        ];
        let data = PanelDataset::from_observations(obs).unwrap();
        let mut buf = Vec::new();
        write_observations(&data, &mut buf).unwrap();
        assert_eq!(read_observations(buf.as_slice()).unwrap(), data);
    }

    #[test]
    fn invalid_observations_rejected() {
        let t = Utc.with_ymd_and_hms(2019, 1, 1, 0, 0, 0).unwrap();
        let bad = ChoiceObservation { user_id: "u".into(), timestamp: t, chosen_index: 2, alternatives: vec![attrs(1.0)], station_ids: vec![] };
        assert!(PanelDataset::from_observations([bad]).is_err());
        let empty = ChoiceObservation { user_id: "u".into(), timestamp: t, chosen_index: 0, alternatives: vec![], station_ids: vec![] };
        assert!(PanelDataset::from_observations([empty]).is_err());
    }
}
