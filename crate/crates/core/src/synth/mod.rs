//! Synthetic choice data drawn from known parameters, a Monte Carlo choice
//! share oracle and a small synthetic world for end-to-end runs.

mod world;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::choice::{observable_utility, ChoiceObservation, ModelKind, NearRule, PanelDataset, ParameterSet, K};
use crate::rng;
use crate::spatial::AttributeVector;
use crate::Level;

pub use world::{generate_world, write_world, World, WorldConfig, WorldError, WorldFiles};

/// Largest attribute values observed per charging level; generated
/// attributes never exceed them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeBounds {
    pub dist_km: f64,
    pub outlets: u32,
    pub rest: f64,
    pub ff: f64,
    pub shop: f64,
    pub sm: f64,
    pub mall: f64,
    pub leis: f64,
    pub sport: f64,
}

impl AttributeBounds {
    pub fn for_level(level: Level) -> Self {
        match level {
            Level::L2 => Self {
                dist_km: 98.658,
                outlets: 13,
                rest: 4.635,
                ff: 4.060,
                shop: 5.257,
                sm: 2.303,
                mall: 1.099,
                leis: 3.526,
                sport: 2.833,
            },
            Level::L3 => Self {
                dist_km: 49.668,
                outlets: 5,
                rest: 3.638,
                ff: 2.079,
                shop: 4.007,
                sm: 0.693,
                mall: 0.693,
                leis: 3.091,
                sport: 2.565,
            },
        }
    }

    pub fn contains(&self, x: &AttributeVector) -> bool {
        (0.0..=self.dist_km).contains(&x.dist_km)
            && x.outlets <= self.outlets
            && x.rest <= self.rest
            && x.ff <= self.ff
            && x.shop <= self.shop
            && x.sm <= self.sm
            && x.mall <= self.mall
            && x.leis <= self.leis
            && x.sport <= self.sport
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsPerUser {
    Fixed(usize),
    /// Uniform on `min..=max`.
    Uniform { min: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub obs_per_user: ObsPerUser,
    /// Alternatives in every choice set.
    pub alternatives: usize,
    pub bounds: AttributeBounds,
    pub truth: ParameterSet,
    pub seed: u64,
    /// Distances are log-normal with this median, clipped to the bounds.
    pub dist_median_km: f64,
    pub dist_log_sd: f64,
    pub walk_prob: f64,
    pub gas_prob: f64,
    pub near: NearRule,
}

impl SynthConfig {
    pub fn new(users: usize, obs_per_user: usize, alternatives: usize, truth: ParameterSet, seed: u64) -> Self {
        Self {
            users,
            obs_per_user: ObsPerUser::Fixed(obs_per_user),
            alternatives,
            bounds: AttributeBounds::for_level(Level::L2),
            truth,
            seed,
            dist_median_km: 4.0,
            dist_log_sd: 1.0,
            walk_prob: 0.3,
            gas_prob: 0.2,
            near: NearRule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub data: PanelDataset,
    pub truth: ParameterSet,
    /// Coefficients each user actually chose with, in user order.
    pub user_betas: Vec<[f64; K]>,
}

fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2021, 7, 1, 0, 0, 0).unwrap()
}

/// One alternative with attributes drawn from the configured generators.
pub fn random_alternative<R: Rng + ?Sized>(cfg: &SynthConfig, r: &mut R) -> AttributeVector {
    let b = &cfg.bounds;
    let dist = LogNormal::new(cfg.dist_median_km.ln(), cfg.dist_log_sd).expect("valid log-normal");
    AttributeVector {
        dist_km: dist.sample(r).clamp(0.0, b.dist_km),
        is_walk_home: u8::from(r.random_bool(cfg.walk_prob)),
        outlets: r.random_range(1..=b.outlets.max(1)),
        is_gas: u8::from(r.random_bool(cfg.gas_prob)),
        rest: r.random_range(0.0..=b.rest),
        ff: r.random_range(0.0..=b.ff),
        shop: r.random_range(0.0..=b.shop),
        sm: r.random_range(0.0..=b.sm),
        mall: r.random_range(0.0..=b.mall),
        leis: r.random_range(0.0..=b.leis),
        sport: r.random_range(0.0..=b.sport),
    }
}

/// Index of the largest value, first on ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = j;
        }
    }
    best
}

/// Random-utility simulation: every user draws one coefficient vector
/// (the means for MNL), every alternative gets independent standard Gumbel
/// noise, and the utility-maximising alternative is recorded as chosen.
pub fn generate_dataset(cfg: &SynthConfig) -> SynthDataset {
    let per_user: Vec<(Vec<ChoiceObservation>, [f64; K])> = (0..cfg.users)
        .into_par_iter()
        .map(|u| {
            let mut r = rng::stream(cfg.seed, &[0x5EED, u as u64]);
            let mut beta = cfg.truth.mu;
            if cfg.truth.model_kind == ModelKind::Mxl {
                for k in 0..K {
                    let eta: f64 = StandardNormal.sample(&mut r);
                    beta[k] += cfg.truth.sigma[k] * eta;
                }
            }
            let t_count = match cfg.obs_per_user {
                ObsPerUser::Fixed(n) => n,
                ObsPerUser::Uniform { min, max } => r.random_range(min..=max),
            };
            let user_id = format!("u{u:06}");
            let obs = (0..t_count)
                .map(|t| {
                    let alternatives: Vec<AttributeVector> =
                        (0..cfg.alternatives).map(|_| random_alternative(cfg, &mut r)).collect();
                    let u_total: Vec<f64> = alternatives
                        .iter()
                        .map(|x| observable_utility(x, &beta, cfg.near) + rng::gumbel(&mut r))
                        .collect();
                    ChoiceObservation {
                        user_id: user_id.clone(),
                        timestamp: epoch() + Duration::days(t as i64),
                        chosen_index: argmax(&u_total),
                        station_ids: (0..alternatives.len()).map(|j| format!("s{j:03}")).collect(),
                        alternatives,
                    }
                })
                .collect();
            (obs, beta)
        })
        .collect();
    let user_betas = per_user.iter().map(|(_, b)| *b).collect();
    let data = PanelDataset::from_observations(per_user.into_iter().flat_map(|(o, _)| o))
        .expect("generated observations are valid");
    SynthDataset { data, truth: cfg.truth.clone(), user_betas }
}

/// Empirical argmax frequencies of `v + Gumbel noise` over `n_draws`.
pub fn choice_share_oracle_v(v: &[f64], n_draws: usize, seed: u64) -> Vec<f64> {
    assert!(n_draws >= 1, "n_draws must be positive");
    let mut r = rng::stream(seed, &[0x0AC1]);
    let mut hits = vec![0usize; v.len()];
    let mut u = vec![0.0; v.len()];
    for _ in 0..n_draws {
        for (uj, vj) in u.iter_mut().zip(v) {
            *uj = vj + rng::gumbel(&mut r);
        }
        hits[argmax(&u)] += 1;
    }
    hits.iter().map(|&h| h as f64 / n_draws as f64).collect()
}

pub fn choice_share_oracle(
    alternatives: &[AttributeVector],
    beta: &[f64; K],
    near: NearRule,
    n_draws: usize,
    seed: u64,
) -> Vec<f64> {
    let v: Vec<f64> = alternatives.iter().map(|x| observable_utility(x, beta, near)).collect();
    choice_share_oracle_v(&v, n_draws, seed)
}
