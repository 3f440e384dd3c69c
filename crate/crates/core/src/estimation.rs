//! Maximum (simulated) likelihood fitting, grouped k-fold cross-validation
//! and distance-outlier trimming.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::choice::{
    mnl_loglik, mxl_simulated_loglik_raw, null_loglik, ChoiceError, ChoiceObservation, Coef, DesignPanel, DrawKind,
    DrawMatrix, ModelKind, NearRule, ObsDesign, PanelDataset, ParameterSet, K,
};
use crate::metrics::{self, DpsaKind, IndicatorReport, Indicators, MetricsError, Predictor};
use crate::optim::{self, inf_norm, LbfgsConfig, StopReason};
use crate::rng;
use crate::stats::{quantile_sorted, sort_floats};

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("invalid fold plan: {0}")]
    Plan(String),
    #[error("invalid estimation config: {0}")]
    Config(String),
    #[error("no observation has more than one alternative")]
    Degenerate,
    #[error("fold {0} has an empty validation set")]
    EmptyValidation(usize),
    #[error(transparent)]
    Choice(#[from] ChoiceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How folds become estimation and validation sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvMode {
    /// Estimate on a fixed-size observation sample from one group, validate
    /// on the other groups.
    L2Style,
    /// Estimate on all other groups, validate on this one.
    L3Style,
}

impl fmt::Display for CvMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CvMode::L2Style => "l2_style",
            CvMode::L3Style => "l3_style",
        })
    }
}

impl FromStr for CvMode {
    type Err = EstimationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "l2" | "l2_style" | "2" => Ok(CvMode::L2Style),
            "l3" | "l3_style" | "3" => Ok(CvMode::L3Style),
            _ => Err(EstimationError::Config(format!("unknown cross-validation mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationConfig {
    pub mode: CvMode,
    pub folds: usize,
    /// Estimation observations per fold in L2-style mode.
    pub sample_size: usize,
    pub draws: usize,
    pub draw_kind: DrawKind,
    pub optimizer: LbfgsConfig,
    pub seed: u64,
    pub outlier_quantile: f64,
    pub near: NearRule,
    /// Starting standard deviation for mixed logit fits.
    pub init_sigma: f64,
    /// Relative step of the finite-difference Hessian.
    pub hessian_step: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            mode: CvMode::L3Style,
            folds: 5,
            sample_size: 5000,
            draws: 1000,
            draw_kind: DrawKind::Pseudo,
            optimizer: LbfgsConfig { divergence_bound: Some(50.0), ..LbfgsConfig::default() },
            seed: 0,
            outlier_quantile: 0.98,
            near: NearRule::default(),
            init_sigma: 0.1,
            hessian_step: 1e-4,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<(), EstimationError> {
        let bad = |m: &str| Err(EstimationError::Config(m.into()));
        if !(self.outlier_quantile > 0.0 && self.outlier_quantile < 1.0) {
            return bad("outlier_quantile must lie in (0, 1)");
        }
        if self.draws == 0 {
            return bad("draws must be positive");
        }
        if self.sample_size == 0 {
            return bad("sample_size must be positive");
        }
        if !(self.hessian_step > 0.0) {
            return bad("hessian_step must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    NotConverged,
    /// Some coefficient exceeded the divergence bound, typically perfect separation.
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub params: ParameterSet,
    /// One per free parameter; NaN where the information matrix gives none.
    pub std_errors: Vec<f64>,
    /// Inverse observed information over the free parameters.
    pub covariance: Vec<Vec<f64>>,
    pub status: FitStatus,
    pub stop: StopReason,
    pub iterations: usize,
    pub grad_norm: f64,
    pub ll_null: f64,
    pub ll_final: f64,
    pub n_obs: usize,
    pub ll_trace: Vec<f64>,
    /// Coefficients whose regressor never varies within a choice set.
    pub non_identified: Vec<Coef>,
}

impl EstimationResult {
    pub fn indicators(&self) -> Result<Indicators, MetricsError> {
        metrics::indicators(self.ll_null, self.ll_final, self.params.free_count(), self.n_obs)
    }
}

fn check_data(panel: &DesignPanel) -> Result<(), EstimationError> {
    if panel.users.iter().flat_map(|u| &u.obs).any(|o| o.rows.len() > 1) {
        Ok(())
    } else {
        Err(EstimationError::Degenerate)
    }
}

/// Central-difference Hessian of an analytic gradient over `free`, inverted
/// into a covariance. Entries outside `free` are NaN.
fn observed_information<G>(mut grad: G, x: &[f64], free: &[usize], rel_step: f64) -> (Vec<f64>, Vec<Vec<f64>>)
where
    G: FnMut(&[f64]) -> Vec<f64>,
{
    let n = x.len();
    let m = free.len();
    let mut hess = DMatrix::<f64>::zeros(m, m);
    for (cj, &j) in free.iter().enumerate() {
        let h = rel_step * x[j].abs().max(1.0);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let (gp, gm) = (grad(&xp), grad(&xm));
        for (ci, &i) in free.iter().enumerate() {
            hess[(ci, cj)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    let info = -(&hess + hess.transpose()) * 0.5;
    let mut se = vec![f64::NAN; n];
    let mut cov = vec![vec![f64::NAN; n]; n];
    if let Some(inv) = info.try_inverse() {
        for (ci, &i) in free.iter().enumerate() {
            let v = inv[(ci, ci)];
            if v.is_finite() && v > 0.0 {
                se[i] = v.sqrt();
            }
            for (cj, &j) in free.iter().enumerate() {
                cov[i][j] = inv[(ci, cj)];
            }
        }
    }
    (se, cov)
}

fn status_of(stop: StopReason) -> FitStatus {
    match stop {
        StopReason::GradientTolerance => FitStatus::Converged,
        StopReason::Diverged => FitStatus::Diverged,
        StopReason::MaxIterations | StopReason::LineSearchFailed => FitStatus::NotConverged,
    }
}

/// Inverse square roots of the MNL information diagonal at zero coefficients
/// (within-choice-set variance of each regressor), 1 where it vanishes.
fn curvature_scale(panel: &DesignPanel) -> [f64; K] {
    let mut info = [0.0; K];
    for o in panel.users.iter().flat_map(|u| &u.obs) {
        let m = o.rows.len() as f64;
        for k in 0..K {
            let mean = o.rows.iter().map(|r| r[k]).sum::<f64>() / m;
            info[k] += o.rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / m;
        }
    }
    info.map(|v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 })
}

fn to_array(v: &[f64]) -> [f64; K] {
    let mut a = [0.0; K];
    a.copy_from_slice(&v[..K]);
    a
}

/// Maximum likelihood MNL fit starting from `init.mu`.
pub fn fit_mnl(data: &PanelDataset, init: &ParameterSet, cfg: &EstimationConfig) -> Result<EstimationResult, EstimationError> {
    cfg.validate()?;
    let panel = DesignPanel::encode(data, cfg.near);
    fit_mnl_design(&panel, init, cfg)
}

pub fn fit_mnl_design(
    panel: &DesignPanel,
    init: &ParameterSet,
    cfg: &EstimationConfig,
) -> Result<EstimationResult, EstimationError> {
    check_data(panel)?;
    let objective = |x: &[f64]| {
        let (ll, g) = mnl_loglik(panel, &to_array(x));
        (ll, g.to_vec())
    };
    let run = optim::maximize_scaled(objective, &init.mu, &curvature_scale(panel), &cfg.optimizer);
    let non_identified = panel.non_identified();
    let free: Vec<usize> = (0..K).filter(|k| !non_identified.contains(k)).collect();
    let (std_errors, covariance) =
        observed_information(|x| objective(x).1, &run.x, &free, cfg.hessian_step);

    let mut params = ParameterSet::mnl(to_array(&run.x));
    params.near_threshold_km = cfg.near.threshold_km;
    params.seed = cfg.seed;
    Ok(EstimationResult {
        params,
        std_errors,
        covariance,
        status: status_of(run.stop),
        stop: run.stop,
        iterations: run.iterations,
        grad_norm: inf_norm(&run.grad),
        ll_null: null_loglik(panel),
        ll_final: run.value,
        n_obs: panel.n_observations(),
        ll_trace: run.trace,
        non_identified: non_identified.into_iter().map(|k| Coef::ALL[k]).collect(),
    })
}

/// Simulated maximum likelihood panel mixed logit fit with draws frozen for
/// the whole run. Standard deviations are reported as absolute values.
pub fn fit_mxl(data: &PanelDataset, init: &ParameterSet, cfg: &EstimationConfig) -> Result<EstimationResult, EstimationError> {
    cfg.validate()?;
    let panel = DesignPanel::encode(data, cfg.near);
    let draws = DrawMatrix::generate(panel.users.len(), cfg.draws, K, cfg.seed, cfg.draw_kind);
    fit_mxl_design(&panel, init, &draws, cfg)
}

pub fn fit_mxl_design(
    panel: &DesignPanel,
    init: &ParameterSet,
    draws: &DrawMatrix,
    cfg: &EstimationConfig,
) -> Result<EstimationResult, EstimationError> {
    check_data(panel)?;
    // surface shape errors before optimizing
    mxl_simulated_loglik_raw(panel, &init.mu, &init.sigma, draws)?;
    let objective = |x: &[f64]| {
        mxl_simulated_loglik_raw(panel, &to_array(&x[..K]), &to_array(&x[K..]), draws).expect("draws checked above")
    };
    let x0: Vec<f64> = init.mu.iter().chain(&init.sigma).copied().collect();
    let scale = curvature_scale(panel);
    let scale: Vec<f64> = scale.iter().chain(&scale).copied().collect();
    let run = optim::maximize_scaled(objective, &x0, &scale, &cfg.optimizer);

    let non_identified = panel.non_identified();
    let free: Vec<usize> = (0..2 * K).filter(|i| !non_identified.contains(&(i % K))).collect();
    let (std_errors, mut covariance) = observed_information(|x| objective(x).1, &run.x, &free, cfg.hessian_step);

    // a normal with -sigma is the same distribution
    let mut x = run.x.clone();
    for k in 0..K {
        if x[K + k] < 0.0 {
            x[K + k] = -x[K + k];
            let i = K + k;
            for j in 0..2 * K {
                covariance[i][j] = -covariance[i][j];
                covariance[j][i] = -covariance[j][i];
            }
        }
    }
    let mut params = ParameterSet::mxl(to_array(&x[..K]), to_array(&x[K..]));
    params.near_threshold_km = cfg.near.threshold_km;
    params.seed = draws.seed;
    params.draws = draws.draws;
    let mut grad = run.grad.clone();
    for k in 0..K {
        if run.x[K + k] < 0.0 {
            grad[K + k] = -grad[K + k];
        }
    }
    Ok(EstimationResult {
        params,
        std_errors,
        covariance,
        status: status_of(run.stop),
        stop: run.stop,
        iterations: run.iterations,
        grad_norm: inf_norm(&grad),
        ll_null: null_loglik(panel),
        ll_final: run.value,
        n_obs: panel.n_observations(),
        ll_trace: run.trace,
        non_identified: non_identified.into_iter().map(|k| Coef::ALL[k]).collect(),
    })
}

/// Zero means with the configured starting standard deviation. All-zero
/// standard deviations would start the ascent next to a saddle.
pub fn default_init(kind: ModelKind, cfg: &EstimationConfig) -> ParameterSet {
    match kind {
        ModelKind::Mnl => ParameterSet::mnl([0.0; K]),
        ModelKind::Mxl => ParameterSet::mxl([0.0; K], [cfg.init_sigma; K]),
    }
}

pub fn fit(data: &PanelDataset, kind: ModelKind, cfg: &EstimationConfig) -> Result<EstimationResult, EstimationError> {
    let init = default_init(kind, cfg);
    match kind {
        ModelKind::Mnl => fit_mnl(data, &init, cfg),
        ModelKind::Mxl => fit_mxl(data, &init, cfg),
    }
}

/// Removes observations whose chosen distance strictly exceeds the
/// (type 7) empirical `quantile` of chosen distances. Returns the cutoff,
/// or `None` for an empty dataset.
pub fn trim_distance_outliers(data: &PanelDataset, quantile: f64) -> (PanelDataset, Option<f64>) {
    let mut dists: Vec<f64> = data.observations().map(|o| o.chosen().dist_km).collect();
    sort_floats(&mut dists);
    let Some(cutoff) = quantile_sorted(&dists, quantile) else {
        return (data.clone(), None);
    };
    let users = data
        .users
        .iter()
        .filter_map(|(u, obs)| {
            let kept: Vec<ChoiceObservation> = obs.iter().filter(|o| o.chosen().dist_km <= cutoff).cloned().collect();
            (!kept.is_empty()).then(|| (u.clone(), kept))
        })
        .collect();
    (PanelDataset { users }, Some(cutoff))
}

/// User to fold assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

/// Shuffles users with `seed`, orders them by observation count (largest
/// first, stable) and puts each into the group with the fewest observations
/// so far, lowest index on ties.
pub fn grouped_kfold(counts: &[(String, usize)], k: usize, seed: u64) -> Result<FoldPlan, EstimationError> {
    if k == 0 || k > counts.len() {
        return Err(EstimationError::Plan(format!("k = {k} with {} users", counts.len())));
    }
    let mut order: Vec<&(String, usize)> = counts.iter().collect();
    order.sort_by(|a, b| a.0.cmp(&b.0));
    order.shuffle(&mut rng::stream(seed, &[0xF01D]));
    order.sort_by(|a, b| b.1.cmp(&a.1));
    let mut totals = vec![0usize; k];
    let mut assignment = BTreeMap::new();
    for (user, n) in order {
        let g = (0..k).min_by_key(|&g| (totals[g], g)).unwrap();
        totals[g] += n;
        assignment.insert(user.clone(), g);
    }
    Ok(FoldPlan { k, seed, assignment })
}

impl FoldPlan {
    pub fn group(&self, fold: usize) -> BTreeSet<String> {
        self.assignment.iter().filter(|(_, &g)| g == fold).map(|(u, _)| u.clone()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), EstimationError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EstimationError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Checks that every user of `data` has a fold below `k`.
    pub fn check(&self, data: &PanelDataset) -> Result<(), EstimationError> {
        for u in data.users.keys() {
            match self.assignment.get(u) {
                Some(&g) if g < self.k => {}
                Some(&g) => return Err(EstimationError::Plan(format!("user `{u}` in fold {g} >= k = {}", self.k))),
                None => return Err(EstimationError::Plan(format!("user `{u}` has no fold"))),
            }
        }
        Ok(())
    }

    /// The estimation panel and validation observations of one fold.
    pub fn split(
        &self,
        data: &PanelDataset,
        fold: usize,
        mode: CvMode,
        sample_size: usize,
    ) -> Result<FoldSplit, EstimationError> {
        if fold >= self.k {
            return Err(EstimationError::Plan(format!("fold {fold} out of range for k = {}", self.k)));
        }
        let group: BTreeSet<String> = self.group(fold).into_iter().filter(|u| data.users.contains_key(u)).collect();
        let others: BTreeSet<String> =
            data.users.keys().filter(|u| !group.contains(*u)).cloned().collect();
        let (estimation, validation_users) = match mode {
            CvMode::L3Style => (data.subset(&others), group),
            CvMode::L2Style => {
                let pool: Vec<&ChoiceObservation> = group.iter().flat_map(|u| &data.users[u]).collect();
                if sample_size > pool.len() {
                    return Err(EstimationError::Config(format!(
                        "fold {fold}: sample_size {sample_size} exceeds the {} observations available",
                        pool.len()
                    )));
                }
                let mut r = rng::stream(self.seed, &[0x5A3F, fold as u64]);
                let mut picked = rand::seq::index::sample(&mut r, pool.len(), sample_size).into_vec();
                picked.sort_unstable();
                let sample = PanelDataset::from_observations(picked.into_iter().map(|i| pool[i].clone()))?;
                (sample, others)
            }
        };
        let validation: Vec<ChoiceObservation> =
            validation_users.iter().filter_map(|u| data.users[u].last().cloned()).collect();
        Ok(FoldSplit {
            fold,
            estimation_users: estimation.users.keys().cloned().collect(),
            estimation,
            validation_users,
            validation,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub fold: usize,
    pub estimation: PanelDataset,
    pub estimation_users: BTreeSet<String>,
    /// The last observation of every validation user, in user order.
    pub validation: Vec<ChoiceObservation>,
    pub validation_users: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub result: EstimationResult,
    pub estimation: IndicatorReport,
    pub validation: IndicatorReport,
}

fn encode_obs(obs: &[ChoiceObservation], near: NearRule) -> Vec<ObsDesign> {
    let data = PanelDataset { users: BTreeMap::from([(String::new(), obs.to_vec())]) };
    // keep the given order; from_observations would re-sort by time
    DesignPanel::encode(&data, near).users.remove(0).obs
}

fn checked_splits(data: &PanelDataset, plan: &FoldPlan, cfg: &EstimationConfig) -> Result<Vec<FoldSplit>, EstimationError> {
    cfg.validate()?;
    if plan.k < 2 {
        return Err(EstimationError::Plan(format!("cross-validation needs k >= 2, got {}", plan.k)));
    }
    plan.check(data)?;
    let splits: Vec<FoldSplit> =
        (0..plan.k).map(|f| plan.split(data, f, cfg.mode, cfg.sample_size)).collect::<Result<_, _>>()?;
    if let Some(s) = splits.iter().find(|s| s.validation.is_empty()) {
        return Err(EstimationError::EmptyValidation(s.fold));
    }
    Ok(splits)
}

/// Fits every fold's estimation set, in fold order.
pub fn fit_folds(
    data: &PanelDataset,
    plan: &FoldPlan,
    kind: ModelKind,
    cfg: &EstimationConfig,
) -> Result<Vec<EstimationResult>, EstimationError> {
    let splits = checked_splits(data, plan, cfg)?;
    splits
        .par_iter()
        .map(|s| {
            let fold_cfg = EstimationConfig { seed: rng::stream_key(cfg.seed, &[0xE571, s.fold as u64]), ..cfg.clone() };
            fit(&s.estimation, kind, &fold_cfg)
        })
        .collect()
}

/// Validation indicators of one parameter set per fold. The `average` DPSA
/// uses the cross-fold average ratio parameters.
pub fn validate_folds(
    data: &PanelDataset,
    plan: &FoldPlan,
    params: &[ParameterSet],
    cfg: &EstimationConfig,
) -> Result<Vec<IndicatorReport>, EstimationError> {
    let splits = checked_splits(data, plan, cfg)?;
    if params.len() != splits.len() {
        return Err(EstimationError::Plan(format!("{} parameter sets for {} folds", params.len(), splits.len())));
    }
    let average = metrics::ratio_table(params).ok().map(|t| t.average_params());
    splits
        .iter()
        .zip(params)
        .map(|(s, p)| {
            let obs = encode_obs(&s.validation, cfg.near);
            let draws = DrawMatrix::generate(
                obs.len(),
                cfg.draws,
                K,
                rng::stream_key(cfg.seed, &[0x7A11, s.fold as u64]),
                cfg.draw_kind,
            );
            let mut dpsa = BTreeMap::new();
            dpsa.insert(DpsaKind::Null, metrics::dpsa(&obs, Predictor::Null)?);
            dpsa.insert(DpsaKind::Closest, metrics::dpsa(&obs, Predictor::Closest)?);
            dpsa.insert(DpsaKind::Final, metrics::dpsa(&obs, Predictor::from_params(p, &draws))?);
            if let Some(avg) = &average {
                dpsa.insert(DpsaKind::Average, metrics::dpsa(&obs, Predictor::from_params(avg, &draws))?);
            }
            Ok(IndicatorReport {
                indicators: metrics::evaluate(&obs, Predictor::from_params(p, &draws), p.free_count())?,
                dpsa,
            })
        })
        .collect()
}

/// Fits every fold and reports estimation and validation indicators.
pub fn run_cv(
    data: &PanelDataset,
    plan: &FoldPlan,
    kind: ModelKind,
    cfg: &EstimationConfig,
) -> Result<Vec<FoldOutcome>, EstimationError> {
    let fits = fit_folds(data, plan, kind, cfg)?;
    let params: Vec<ParameterSet> = fits.iter().map(|r| r.params.clone()).collect();
    let validation = validate_folds(data, plan, &params, cfg)?;
    fits.into_iter()
        .zip(validation)
        .enumerate()
        .map(|(fold, (result, validation))| {
            let estimation = IndicatorReport { indicators: result.indicators()?, dpsa: BTreeMap::new() };
            Ok(FoldOutcome { fold, result, estimation, validation })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::AttributeVector;
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;

    fn attr(dist: f64, rest: f64) -> AttributeVector {
        AttributeVector { dist_km: dist, rest, ..Default::default() }
    }

    fn observation(user: &str, t: i64, chosen: usize, alts: Vec<AttributeVector>) -> ChoiceObservation {
        ChoiceObservation {
            user_id: user.into(),
            timestamp: Utc.timestamp_opt(t, 0).unwrap(),
            chosen_index: chosen,
            alternatives: alts,
            station_ids: vec![],
        }
    }

    fn counts(c: &[usize]) -> Vec<(String, usize)> {
        c.iter().enumerate().map(|(i, &n)| (format!("u{i:03}"), n)).collect()
    }

    fn toy_panel(users: usize, per_user: usize, seed: u64) -> PanelDataset {
        use rand::Rng;
        let mut r = rng::stream(seed, &[]);
        let mut obs = Vec::new();
        for u in 0..users {
            for t in 0..per_user {
                let alts: Vec<AttributeVector> = (0..4)
                    .map(|_| AttributeVector {
                        is_walk_home: r.random_range(0..2),
                        ..attr(r.random_range(0.2..20.0), r.random_range(0.0..3.0))
                    })
                    .collect();
                obs.push(observation(&format!("u{u:03}"), t as i64, r.random_range(0..4), alts));
            }
        }
        PanelDataset::from_observations(obs).unwrap()
    }

    #[test]
    fn kfold_balances_by_hand_example() {
        let plan = grouped_kfold(&counts(&[5, 5, 1, 1]), 2, 3).unwrap();
        let mut totals = [0; 2];
        for (u, n) in counts(&[5, 5, 1, 1]) {
            totals[plan.assignment[&u]] += n;
        }
        assert_eq!(totals, [6, 6]);
    }

    #[test]
    fn kfold_even_split_and_determinism() {
        let c = counts(&[1; 10]);
        let plan = grouped_kfold(&c, 5, 11).unwrap();
        for f in 0..5 {
            assert_eq!(plan.group(f).len(), 2);
        }
        assert_eq!(plan, grouped_kfold(&c, 5, 11).unwrap());
        assert!(grouped_kfold(&c, 0, 1).is_err());
        assert!(grouped_kfold(&c, 11, 1).is_err());
    }

    #[test]
    fn trimming() {
        let obs: Vec<ChoiceObservation> =
            (0..100).map(|i| observation("a", i, 0, vec![attr(1.0 + i as f64, 0.0), attr(0.5, 0.0)])).collect();
        let data = PanelDataset::from_observations(obs).unwrap();
        let (kept, cutoff) = trim_distance_outliers(&data, 0.98);
        assert_eq!(kept.n_observations(), 98);
        // type 7 on 1..=100: 1 + 0.98 * 99 = 98.02
        assert!((cutoff.unwrap() - 98.02).abs() < 1e-12);

        let same: Vec<ChoiceObservation> = (0..50).map(|i| observation("a", i, 0, vec![attr(3.0, 0.0)])).collect();
        let data = PanelDataset::from_observations(same).unwrap();
        assert_eq!(trim_distance_outliers(&data, 0.98).0.n_observations(), 50);
    }

    #[test]
    fn zero_iterations_returns_init() {
        let data = toy_panel(10, 3, 1);
        let cfg = EstimationConfig {
            optimizer: LbfgsConfig { max_iterations: 0, ..Default::default() },
            draws: 5,
            ..Default::default()
        };
        let mut mu = [0.0; K];
        mu[Coef::DistFar.index()] = -0.2;
        let r = fit_mnl(&data, &ParameterSet::mnl(mu), &cfg).unwrap();
        assert_eq!(r.status, FitStatus::NotConverged);
        assert_eq!(r.params.mu, mu);

        let truth = ParameterSet::mxl(mu, [0.3; K]);
        let r = fit_mxl(&data, &truth, &cfg).unwrap();
        assert_eq!(r.params.mu, truth.mu);
        assert_eq!(r.params.sigma, truth.sigma);
    }

    #[test]
    fn non_varying_attribute_is_flagged() {
        let data = toy_panel(150, 3, 2);
        let r = fit_mnl(&data, &ParameterSet::mnl([0.0; K]), &EstimationConfig::default()).unwrap();
        assert!(r.non_identified.contains(&Coef::Mall));
        assert!(!r.non_identified.contains(&Coef::DistFar));
        assert_eq!(r.params.mean(Coef::Mall), 0.0);
        assert!(r.std_errors[Coef::Mall.index()].is_nan());
        assert!(r.std_errors[Coef::DistFar.index()] > 0.0);
        assert_eq!(r.status, FitStatus::Converged);
        assert!(r.ll_trace.windows(2).all(|w| w[1] >= w[0] - 1e-12 * (1.0 + w[0].abs())));
    }

    #[test]
    fn separated_data_diverges() {
        // the nearest alternative is always chosen, by a small margin
        let obs: Vec<ChoiceObservation> = (0..30)
            .map(|i| observation("a", i, 0, vec![attr(2.0, 0.0), attr(2.0 + 0.01 * (1 + i % 5) as f64, 0.0)]))
            .collect();
        let data = PanelDataset::from_observations(obs).unwrap();
        let r = fit_mnl(&data, &ParameterSet::mnl([0.0; K]), &EstimationConfig::default()).unwrap();
        assert_eq!(r.status, FitStatus::Diverged);
    }

    #[test]
    fn degenerate_data_rejected() {
        let obs = vec![observation("a", 0, 0, vec![attr(2.0, 0.0)])];
        let data = PanelDataset::from_observations(obs).unwrap();
        assert!(matches!(fit_mnl(&data, &ParameterSet::mnl([0.0; K]), &EstimationConfig::default()), Err(EstimationError::Degenerate)));
    }

    #[test]
    fn l3_split_is_four_to_one() {
        let data = toy_panel(50, 3, 4);
        let plan = grouped_kfold(&data.counts(), 5, 9).unwrap();
        for f in 0..5 {
            let s = plan.split(&data, f, CvMode::L3Style, 0).unwrap();
            assert_eq!(s.estimation_users.len(), 40);
            assert_eq!(s.validation_users.len(), 10);
            assert!(s.estimation_users.is_disjoint(&s.validation_users));
        }
    }

    #[test]
    fn l2_split_samples_one_group() {
        let data = toy_panel(50, 4, 5);
        let plan = grouped_kfold(&data.counts(), 5, 9).unwrap();
        let s = plan.split(&data, 2, CvMode::L2Style, 25).unwrap();
        assert_eq!(s.estimation.n_observations(), 25);
        assert!(s.estimation_users.is_subset(&plan.group(2)));
        assert_eq!(s.validation_users.len(), 40);
        assert!(plan.split(&data, 2, CvMode::L2Style, 41).is_err());
    }

    #[test]
    fn cv_runs_and_reports() {
        let data = toy_panel(40, 3, 6);
        let plan = grouped_kfold(&data.counts(), 5, 1).unwrap();
        let cfg = EstimationConfig { draws: 20, ..Default::default() };
        let out = run_cv(&data, &plan, ModelKind::Mnl, &cfg).unwrap();
        assert_eq!(out.len(), 5);
        for o in &out {
            assert_eq!(o.validation.indicators.n, 8);
            assert!(o.estimation.indicators.ll_final >= o.estimation.indicators.ll_null - 1e-9);
            assert_eq!(o.validation.dpsa[&DpsaKind::Null].min, 0.25);
            assert!(o.validation.dpsa.contains_key(&DpsaKind::Average));
        }
        let one = grouped_kfold(&data.counts(), 1, 1).unwrap();
        assert!(run_cv(&data, &one, ModelKind::Mnl, &cfg).is_err());
    }

    #[test]
    fn cv_is_reproducible() {
        let data = toy_panel(30, 3, 7);
        let plan = grouped_kfold(&data.counts(), 3, 2).unwrap();
        let cfg = EstimationConfig { draws: 10, ..Default::default() };
        let a = run_cv(&data, &plan, ModelKind::Mxl, &cfg).unwrap();
        let b = run_cv(&data, &plan, ModelKind::Mxl, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn plan_round_trips_through_json() {
        let plan = grouped_kfold(&counts(&[3, 1, 4, 1, 5, 9, 2, 6]), 3, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cv_plan.json");
        plan.save(&path).unwrap();
        assert_eq!(FoldPlan::load(&path).unwrap(), plan);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kfold_partitions_users(cs in proptest::collection::vec(1usize..20, 5..60), k in 1usize..6, seed in any::<u64>()) {
            let c = counts(&cs);
            let plan = grouped_kfold(&c, k, seed).unwrap();
            prop_assert_eq!(plan.assignment.len(), c.len());
            prop_assert!(plan.assignment.values().all(|&g| g < k));
            // greedy balance: spread bounded by the largest count
            let mut totals = vec![0usize; k];
            for (u, n) in &c {
                totals[plan.assignment[u]] += n;
            }
            let spread = totals.iter().max().unwrap() - totals.iter().min().unwrap();
            prop_assert!(spread <= *cs.iter().max().unwrap());
        }
    }
}
