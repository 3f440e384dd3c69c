//! Charging-station siting: choose `p` candidate stations maximising either
//! the total (p-median) or the worst-off (max-min) customer utility, where
//! each customer uses their best open station.
//!
//! Both exact solvers walk candidates in station-id order, including before
//! excluding, so the first optimal subset they meet is the lexicographically
//! smallest one. That fixes the tie-breaking rule.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_m, LatLon, Polygon};
use crate::rng;
use crate::spatial::io::write_point_features;
use crate::utility_sim::UtilityMatrix;

#[derive(Debug, Error)]
pub enum SitingError {
    #[error("p = {p} is infeasible with {candidates} candidates")]
    InfeasibleP { p: usize, candidates: usize },
    #[error("station `{0}` is not in the instance")]
    UnknownStation(String),
    #[error("customer `{0}` has no utilities")]
    MissingCustomer(String),
    #[error("station `{0}` has no utilities")]
    MissingStation(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("utility for ({customer}, {station}) is not finite")]
    NonFinite { customer: String, station: String },
    #[error("customer `{0}` has a non-positive weight")]
    BadWeight(String),
    #[error("solution opens {found} stations, expected {expected}")]
    WrongSize { expected: usize, found: usize },
    #[error("candidate region is empty")]
    EmptyRegion,
    #[error("minimum spacing must be positive")]
    BadSpacing,
    #[error("placed only {achieved} of {requested} candidates before the retry cap")]
    TooDense { achieved: usize, requested: usize },
    #[error("{0}")]
    Parse(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Spatial(#[from] crate::spatial::SpatialError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SitingModel {
    #[serde(rename = "pmedian")]
    PMedian,
    #[serde(rename = "maxmin")]
    MaxMin,
}

impl SitingModel {
    pub const ALL: [SitingModel; 2] = [SitingModel::PMedian, SitingModel::MaxMin];

    pub fn name(self) -> &'static str {
        match self {
            SitingModel::PMedian => "pmedian",
            SitingModel::MaxMin => "maxmin",
        }
    }
}

impl fmt::Display for SitingModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SitingModel {
    type Err = SitingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "pmedian" => Ok(SitingModel::PMedian),
            "maxmin" => Ok(SitingModel::MaxMin),
            _ => Err(SitingError::Parse(format!("unknown siting model `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverKind {
    BruteForce,
    BranchBound,
    LocalSearch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Customer {
    pub customer_id: String,
    pub pos: LatLon,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub station_id: String,
    pub pos: LatLon,
    pub existing: bool,
}

pub const DEFAULT_EXACT_THRESHOLD: usize = 20;

/// A siting problem with utilities aligned to `customers` x `sites`.
#[derive(Debug, Clone, PartialEq)]
pub struct SitingInstance {
    pub customers: Vec<Customer>,
    pub sites: Vec<Site>,
    u: Vec<f64>,
    pub p: usize,
    pub consider_existing: bool,
    pub model: SitingModel,
    /// Candidate counts above this use the heuristics.
    pub exact_threshold: usize,
    /// Candidate site indices in station-id order.
    cand: Vec<usize>,
    /// Existing site indices that enter every choice set (empty unless
    /// `consider_existing`).
    exist: Vec<usize>,
}

impl SitingInstance {
    /// Aligns `utilities` to the given customers and sites by id.
    pub fn new(
        customers: Vec<Customer>,
        sites: Vec<Site>,
        utilities: &UtilityMatrix,
        p: usize,
        consider_existing: bool,
        model: SitingModel,
    ) -> Result<Self, SitingError> {
        let cix: std::collections::HashMap<&str, usize> =
            utilities.customers.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let six: std::collections::HashMap<&str, usize> =
            utilities.stations.iter().enumerate().map(|(j, s)| (s.as_str(), j)).collect();
        let rows = customers
            .iter()
            .map(|c| cix.get(c.customer_id.as_str()).copied().ok_or_else(|| SitingError::MissingCustomer(c.customer_id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let cols = sites
            .iter()
            .map(|s| six.get(s.station_id.as_str()).copied().ok_or_else(|| SitingError::MissingStation(s.station_id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let mut u = Vec::with_capacity(rows.len() * cols.len());
        for &r in &rows {
            for &c in &cols {
                u.push(utilities.get(r, c));
            }
        }
        Self::from_values(customers, sites, u, p, consider_existing, model)
    }

    /// `u` is row-major by customer over `sites`.
    pub fn from_values(
        customers: Vec<Customer>,
        sites: Vec<Site>,
        u: Vec<f64>,
        p: usize,
        consider_existing: bool,
        model: SitingModel,
    ) -> Result<Self, SitingError> {
        let m = sites.len();
        assert_eq!(u.len(), customers.len() * m, "utility matrix shape");
        let mut seen = std::collections::HashSet::new();
        for id in customers.iter().map(|c| &c.customer_id).chain(sites.iter().map(|s| &s.station_id)) {
            if !seen.insert(id.as_str()) {
                return Err(SitingError::DuplicateId(id.clone()));
            }
        }
        if let Some(c) = customers.iter().find(|c| !(c.weight > 0.0 && c.weight.is_finite())) {
            return Err(SitingError::BadWeight(c.customer_id.clone()));
        }
        let mut cand: Vec<usize> = (0..m).filter(|&j| !sites[j].existing).collect();
        cand.sort_by(|&a, &b| sites[a].station_id.cmp(&sites[b].station_id));
        let exist: Vec<usize> = if consider_existing { (0..m).filter(|&j| sites[j].existing).collect() } else { Vec::new() };
        for (i, c) in customers.iter().enumerate() {
            for &j in cand.iter().chain(&exist) {
                if !u[i * m + j].is_finite() {
                    return Err(SitingError::NonFinite { customer: c.customer_id.clone(), station: sites[j].station_id.clone() });
                }
            }
        }
        if p == 0 || p > cand.len() {
            return Err(SitingError::InfeasibleP { p, candidates: cand.len() });
        }
        Ok(Self { customers, sites, u, p, consider_existing, model, exact_threshold: DEFAULT_EXACT_THRESHOLD, cand, exist })
    }

    pub fn with_p(&self, p: usize) -> Result<Self, SitingError> {
        if p == 0 || p > self.cand.len() {
            return Err(SitingError::InfeasibleP { p, candidates: self.cand.len() });
        }
        Ok(Self { p, ..self.clone() })
    }

    pub fn with_model(&self, model: SitingModel) -> Self {
        Self { model, ..self.clone() }
    }

    pub fn n_candidates(&self) -> usize {
        self.cand.len()
    }

    /// Candidate station ids in id order.
    pub fn candidate_ids(&self) -> Vec<&str> {
        self.cand.iter().map(|&j| self.sites[j].station_id.as_str()).collect()
    }

    pub fn utility(&self, i: usize, j: usize) -> f64 {
        self.u[i * self.sites.len() + j]
    }

    fn site_index(&self, id: &str) -> Result<usize, SitingError> {
        self.sites.iter().position(|s| s.station_id == id).ok_or_else(|| SitingError::UnknownStation(id.to_string()))
    }

    /// Best utility per customer over the given sites plus considered
    /// existing ones.
    fn best(&self, open: &[usize]) -> Vec<f64> {
        let m = self.sites.len();
        (0..self.customers.len())
            .map(|i| {
                open.iter().chain(&self.exist).map(|&j| self.u[i * m + j]).fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    fn pmedian_of(&self, best: &[f64]) -> f64 {
        best.iter().zip(&self.customers).map(|(b, c)| c.weight * b).sum()
    }

    fn maxmin_of(best: &[f64]) -> f64 {
        best.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn objectives_idx(&self, open: &[usize]) -> Objectives {
        let best = self.best(open);
        Objectives { pmedian: self.pmedian_of(&best), maxmin: Self::maxmin_of(&best) }
    }

    fn objective_idx(&self, open: &[usize]) -> f64 {
        let o = self.objectives_idx(open);
        match self.model {
            SitingModel::PMedian => o.pmedian,
            SitingModel::MaxMin => o.maxmin,
        }
    }

    /// Each customer's best station in `open` plus considered existing
    /// stations; ties go to the smaller station id.
    fn assign(&self, open: &[usize]) -> Vec<usize> {
        let m = self.sites.len();
        (0..self.customers.len())
            .map(|i| {
                let mut best: Option<usize> = None;
                for &j in open.iter().chain(&self.exist) {
                    best = match best {
                        None => Some(j),
                        Some(b) => {
                            let (ub, uj) = (self.u[i * m + b], self.u[i * m + j]);
                            if uj > ub || (uj == ub && self.sites[j].station_id < self.sites[b].station_id) {
                                Some(j)
                            } else {
                                Some(b)
                            }
                        }
                    }
                }
                best.expect("at least one open station")
            })
            .collect()
    }

    fn solution(&self, open_pos: &[usize], solver: SolverKind, certified: bool) -> SitingSolution {
        let open: Vec<usize> = open_pos.iter().map(|&q| self.cand[q]).collect();
        let assign = self.assign(&open);
        let mut ids: Vec<String> = open.iter().map(|&j| self.sites[j].station_id.clone()).collect();
        ids.sort();
        SitingSolution {
            model: self.model,
            p: self.p,
            consider_existing: self.consider_existing,
            open: ids,
            assignment: self
                .customers
                .iter()
                .zip(&assign)
                .map(|(c, &j)| (c.customer_id.clone(), self.sites[j].station_id.clone()))
                .collect(),
            objective: self.objective_idx(&open),
            solver,
            certified,
        }
    }

    /// suffix[q][i]: best utility of customer i over candidates at
    /// positions q.. (NEG_INFINITY past the end).
    fn suffix_max(&self) -> Vec<Vec<f64>> {
        let n = self.customers.len();
        let m = self.sites.len();
        let mut out = vec![vec![f64::NEG_INFINITY; n]; self.cand.len() + 1];
        for q in (0..self.cand.len()).rev() {
            let j = self.cand[q];
            for i in 0..n {
                out[q][i] = out[q + 1][i].max(self.u[i * m + j]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objectives {
    pub pmedian: f64,
    pub maxmin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SitingSolution {
    pub model: SitingModel,
    pub p: usize,
    pub consider_existing: bool,
    /// Opened candidate ids, sorted.
    pub open: Vec<String>,
    /// Customer id to assigned station id.
    pub assignment: BTreeMap<String, String>,
    pub objective: f64,
    pub solver: SolverKind,
    /// True when the solver proves optimality.
    pub certified: bool,
}

/// Both objectives of an open set under the instance's utilities.
pub fn evaluate_solution(open: &[String], inst: &SitingInstance) -> Result<Objectives, SitingError> {
    if open.len() != inst.p {
        return Err(SitingError::WrongSize { expected: inst.p, found: open.len() });
    }
    let idx = open.iter().map(|id| inst.site_index(id)).collect::<Result<Vec<_>, _>>()?;
    if let Some(&j) = idx.iter().find(|&&j| inst.sites[j].existing) {
        return Err(SitingError::UnknownStation(format!("{} (existing, not a candidate)", inst.sites[j].station_id)));
    }
    Ok(inst.objectives_idx(&idx))
}

/// The model's objective of `open` under the instance's utilities.
pub fn evaluate_objective(open: &[String], inst: &SitingInstance) -> Result<f64, SitingError> {
    let o = evaluate_solution(open, inst)?;
    Ok(match inst.model {
        SitingModel::PMedian => o.pmedian,
        SitingModel::MaxMin => o.maxmin,
    })
}

/// The fraction of opened stations that are some customer's assigned
/// station.
pub fn active_count(sol: &SitingSolution) -> usize {
    let used: std::collections::HashSet<&str> = sol.assignment.values().map(String::as_str).collect();
    sol.open.iter().filter(|s| used.contains(s.as_str())).count()
}

/// Re-derives the assignment of `open` under another instance's utilities.
pub fn reassign(open: &[String], inst: &SitingInstance) -> Result<BTreeMap<String, String>, SitingError> {
    let idx = open.iter().map(|id| inst.site_index(id)).collect::<Result<Vec<_>, _>>()?;
    Ok(inst
        .customers
        .iter()
        .zip(inst.assign(&idx))
        .map(|(c, j)| (c.customer_id.clone(), inst.sites[j].station_id.clone()))
        .collect())
}

/// Dispatches on the instance's model.
pub fn solve(inst: &SitingInstance) -> Result<SitingSolution, SitingError> {
    match inst.model {
        SitingModel::PMedian => solve_pmedian(inst),
        SitingModel::MaxMin => solve_maxmin(inst),
    }
}

/// Enumerates all subsets of size p in lexicographic order. The oracle for
/// the other solvers; exponential.
pub fn solve_exhaustive(inst: &SitingInstance) -> SitingSolution {
    let mut comb: Vec<usize> = (0..inst.p).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        let open: Vec<usize> = comb.iter().map(|&q| inst.cand[q]).collect();
        let v = inst.objective_idx(&open);
        if best.as_ref().is_none_or(|(b, _)| v > *b) {
            best = Some((v, comb.clone()));
        }
        if !next_combination(&mut comb, inst.cand.len()) {
            break;
        }
    }
    inst.solution(&best.expect("p >= 1").1, SolverKind::BruteForce, true)
}

fn next_combination(comb: &mut [usize], n: usize) -> bool {
    let k = comb.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if comb[i] < n - k + i {
            comb[i] += 1;
            for t in i + 1..k {
                comb[t] = comb[t - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn slack(v: f64) -> f64 {
    1e-9 * (1.0 + v.abs())
}

/// Greedy p-median start: repeatedly add the candidate with the largest
/// objective (earliest position on ties).
fn greedy_pmedian(inst: &SitingInstance) -> Vec<usize> {
    let n = inst.customers.len();
    let m = inst.sites.len();
    let mut cur = inst.best(&[]);
    let mut chosen: Vec<usize> = Vec::with_capacity(inst.p);
    let mut used = vec![false; inst.cand.len()];
    for _ in 0..inst.p {
        let mut pick: Option<(usize, f64)> = None;
        for q in (0..inst.cand.len()).filter(|&q| !used[q]) {
            let j = inst.cand[q];
            let v: f64 = (0..n).map(|i| inst.customers[i].weight * cur[i].max(inst.u[i * m + j])).sum();
            if pick.is_none_or(|(_, b)| v > b) {
                pick = Some((q, v));
            }
        }
        let (q, _) = pick.expect("p <= candidates");
        used[q] = true;
        chosen.push(q);
        let j = inst.cand[q];
        for i in 0..n {
            cur[i] = cur[i].max(inst.u[i * m + j]);
        }
    }
    chosen.sort_unstable();
    chosen
}

struct PMedianSearch<'a> {
    inst: &'a SitingInstance,
    suffix: Vec<Vec<f64>>,
    best_val: f64,
    best_set: Vec<usize>,
}

impl PMedianSearch<'_> {
    fn accept(&mut self, v: f64, set: &[usize]) {
        if v > self.best_val || (v == self.best_val && set < &self.best_set[..]) {
            self.best_val = v;
            self.best_set = set.to_vec();
        }
    }

    fn bound(&self, pos: usize, r: usize, cur: &[f64]) -> f64 {
        let inst = self.inst;
        let m = inst.sites.len();
        let w = |i: usize| inst.customers[i].weight;
        // every customer at most reaches its best remaining candidate
        let a: f64 = cur.iter().enumerate().map(|(i, &c)| w(i) * c.max(self.suffix[pos][i])).sum();
        if cur.iter().any(|c| !c.is_finite()) {
            return a;
        }
        // the objective is submodular, so r additions gain at most the r
        // largest single-candidate gains
        let base: f64 = cur.iter().enumerate().map(|(i, &c)| w(i) * c).sum();
        let mut gains: Vec<f64> = inst.cand[pos..]
            .iter()
            .map(|&j| cur.iter().enumerate().map(|(i, &c)| w(i) * (inst.u[i * m + j] - c).max(0.0)).sum())
            .collect();
        gains.sort_unstable_by(|x, y| y.total_cmp(x));
        let b = base + gains.iter().take(r).sum::<f64>();
        a.min(b)
    }

    fn dfs(&mut self, pos: usize, chosen: &mut Vec<usize>, cur: &[f64]) {
        let inst = self.inst;
        if chosen.len() == inst.p {
            let v = inst.pmedian_of(cur);
            self.accept(v, chosen);
            return;
        }
        let r = inst.p - chosen.len();
        if inst.cand.len() - pos < r {
            return;
        }
        if self.bound(pos, r, cur) < self.best_val - slack(self.best_val) {
            return;
        }
        let m = inst.sites.len();
        let j = inst.cand[pos];
        let next: Vec<f64> = cur.iter().enumerate().map(|(i, &c)| c.max(inst.u[i * m + j])).collect();
        chosen.push(pos);
        self.dfs(pos + 1, chosen, &next);
        chosen.pop();
        self.dfs(pos + 1, chosen, cur);
    }
}

/// Maximises the (weighted) sum over customers of their best open utility.
/// Exact branch and bound up to `exact_threshold` candidates, swap local
/// search beyond.
pub fn solve_pmedian(inst: &SitingInstance) -> Result<SitingSolution, SitingError> {
    let inst = &inst.with_model(SitingModel::PMedian);
    let greedy = greedy_pmedian(inst);
    if inst.cand.len() > inst.exact_threshold {
        let open = swap_search(inst, greedy);
        return Ok(inst.solution(&open, SolverKind::LocalSearch, false));
    }
    let open: Vec<usize> = greedy.iter().map(|&q| inst.cand[q]).collect();
    let mut search =
        PMedianSearch { inst, suffix: inst.suffix_max(), best_val: inst.objective_idx(&open), best_set: greedy };
    let start = inst.best(&[]);
    search.dfs(0, &mut Vec::with_capacity(inst.p), &start);
    let best = search.best_set;
    Ok(inst.solution(&best, SolverKind::BranchBound, true))
}

/// First-improvement swap search from `start` (positions into the
/// candidate list).
fn swap_search(inst: &SitingInstance, start: Vec<usize>) -> Vec<usize> {
    let mut open = start;
    let idx = |open: &[usize]| open.iter().map(|&q| inst.cand[q]).collect::<Vec<_>>();
    let mut val = inst.objective_idx(&idx(&open));
    let mut improved = true;
    while improved {
        improved = false;
        'outer: for a in 0..open.len() {
            for q in 0..inst.cand.len() {
                if open.contains(&q) {
                    continue;
                }
                let mut trial = open.clone();
                trial[a] = q;
                let v = inst.objective_idx(&idx(&trial));
                if v > val + slack(val) {
                    open = trial;
                    val = v;
                    improved = true;
                    break 'outer;
                }
            }
        }
    }
    open.sort_unstable();
    open
}

struct CoverSearch<'a> {
    inst: &'a SitingInstance,
    suffix: &'a [Vec<f64>],
    tau: f64,
}

impl CoverSearch<'_> {
    /// Lexicographically first size-r completion from `pos` covering every
    /// customer in `uncovered`.
    fn dfs(&self, pos: usize, r: usize, uncovered: &[usize], chosen: &mut Vec<usize>) -> bool {
        if uncovered.is_empty() {
            if self.inst.cand.len() - pos < r {
                return false;
            }
            chosen.extend(pos..pos + r);
            return true;
        }
        if r == 0 || self.inst.cand.len() - pos < r {
            return false;
        }
        if uncovered.iter().any(|&i| self.suffix[pos][i] < self.tau) {
            return false;
        }
        let m = self.inst.sites.len();
        let j = self.inst.cand[pos];
        let rest: Vec<usize> = uncovered.iter().copied().filter(|&i| self.inst.u[i * m + j] < self.tau).collect();
        chosen.push(pos);
        if self.dfs(pos + 1, r - 1, &rest, chosen) {
            return true;
        }
        chosen.pop();
        self.dfs(pos + 1, r, uncovered, chosen)
    }
}

fn greedy_cover(inst: &SitingInstance, tau: f64, uncovered: &[usize]) -> Option<Vec<usize>> {
    let m = inst.sites.len();
    let mut left = uncovered.to_vec();
    let mut chosen = Vec::new();
    let mut used = vec![false; inst.cand.len()];
    while chosen.len() < inst.p && !left.is_empty() {
        let (q, count) = (0..inst.cand.len())
            .filter(|&q| !used[q])
            .map(|q| (q, left.iter().filter(|&&i| inst.u[i * m + inst.cand[q]] >= tau).count()))
            .fold((usize::MAX, 0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if count == 0 {
            return None;
        }
        used[q] = true;
        chosen.push(q);
        left.retain(|&i| inst.u[i * m + inst.cand[q]] < tau);
    }
    if !left.is_empty() {
        return None;
    }
    let mut q = 0;
    while chosen.len() < inst.p {
        if !used[q] {
            used[q] = true;
            chosen.push(q);
        }
        q += 1;
    }
    chosen.sort_unstable();
    Some(chosen)
}

/// Maximises the smallest best-open utility over customers. Binary search
/// over the distinct utility values; each threshold is checked by an exact
/// cover search up to `exact_threshold` candidates, by greedy cover beyond.
pub fn solve_maxmin(inst: &SitingInstance) -> Result<SitingSolution, SitingError> {
    let inst = &inst.with_model(SitingModel::MaxMin);
    let exact = inst.cand.len() <= inst.exact_threshold;
    let m = inst.sites.len();
    let n = inst.customers.len();
    let suffix = inst.suffix_max();
    let existing_best = inst.best(&[]);
    let mut taus: Vec<f64> = (0..n)
        .flat_map(|i| inst.cand.iter().chain(&inst.exist).map(move |&j| i * m + j))
        .map(|k| inst.u[k])
        .collect();
    taus.sort_unstable_by(f64::total_cmp);
    taus.dedup();

    let feasible = |tau: f64| -> Option<Vec<usize>> {
        let uncovered: Vec<usize> = (0..n).filter(|&i| existing_best[i] < tau).collect();
        if exact {
            let mut chosen = Vec::with_capacity(inst.p);
            CoverSearch { inst, suffix: &suffix, tau }.dfs(0, inst.p, &uncovered, &mut chosen).then_some(chosen)
        } else {
            greedy_cover(inst, tau, &uncovered)
        }
    };

    // the smallest value is always reachable; find the largest feasible one
    let (mut lo, mut hi) = (0usize, taus.len());
    let mut best = match taus.first() {
        Some(&t) => feasible(t).expect("lowest threshold is feasible"),
        None => (0..inst.p).collect(),
    };
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        match feasible(taus[mid]) {
            Some(set) => {
                lo = mid;
                best = set;
            }
            None => hi = mid,
        }
    }
    if !exact {
        return Ok(inst.solution(&best, SolverKind::LocalSearch, false));
    }
    Ok(inst.solution(&best, SolverKind::BranchBound, true))
}

/// Candidate placement over a region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGenConfig {
    pub region: Polygon,
    pub count: usize,
    pub min_spacing_m: f64,
    pub seed: u64,
    /// Rejection-sampling attempts before giving up.
    pub max_tries: usize,
}

impl CandidateGenConfig {
    pub fn new(region: Polygon, seed: u64) -> Self {
        Self { region, count: 200, min_spacing_m: 200.0, seed, max_tries: 200_000 }
    }
}

/// Uniform random candidate points inside the region, each at least
/// `min_spacing_m` from every existing station and earlier candidate.
pub fn generate_candidates(existing: &[LatLon], cfg: &CandidateGenConfig) -> Result<Vec<Site>, SitingError> {
    if !(cfg.min_spacing_m > 0.0) {
        return Err(SitingError::BadSpacing);
    }
    if cfg.region.is_empty() {
        return Err(SitingError::EmptyRegion);
    }
    let (south, west, north, east) = cfg.region.bounds();
    let mut rng = rng::stream(cfg.seed, &[0xCA4D]);
    let mut placed: Vec<LatLon> = Vec::with_capacity(cfg.count);
    let mut tries = 0;
    while placed.len() < cfg.count {
        if tries == cfg.max_tries {
            return Err(SitingError::TooDense { achieved: placed.len(), requested: cfg.count });
        }
        tries += 1;
        let p = LatLon::new(rng.random_range(south..=north), rng.random_range(west..=east));
        if !cfg.region.contains(p) {
            continue;
        }
        if existing.iter().chain(&placed).all(|&q| haversine_m(p, q) >= cfg.min_spacing_m) {
            placed.push(p);
        }
    }
    Ok(placed
        .into_iter()
        .enumerate()
        .map(|(k, pos)| Site { station_id: format!("cand{k:03}"), pos, existing: false })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct CustomerRow {
    customer_id: String,
    lat: f64,
    lon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<f64>,
}

/// `customer_id,lat,lon[,weight]`; missing weights default to 1.
pub fn read_customers<R: Read>(input: R) -> Result<Vec<Customer>, SitingError> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize::<CustomerRow>()
        .map(|row| {
            let row = row?;
            Ok(Customer { customer_id: row.customer_id, pos: LatLon::new(row.lat, row.lon), weight: row.weight.unwrap_or(1.0) })
        })
        .collect()
}

pub fn write_customers<W: Write>(customers: &[Customer], out: W) -> Result<(), SitingError> {
    let weighted = customers.iter().any(|c| c.weight != 1.0);
    let mut w = csv::Writer::from_writer(out);
    for c in customers {
        w.serialize(CustomerRow {
            customer_id: c.customer_id.clone(),
            lat: c.pos.lat,
            lon: c.pos.lon,
            weight: weighted.then_some(c.weight),
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SiteRow {
    station_id: String,
    lat: f64,
    lon: f64,
    existing: u8,
}

/// `station_id,lat,lon,existing` with `existing` 0/1.
pub fn read_sites<R: Read>(input: R) -> Result<Vec<Site>, SitingError> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize::<SiteRow>()
        .map(|row| {
            let row = row?;
            Ok(Site { station_id: row.station_id, pos: LatLon::new(row.lat, row.lon), existing: row.existing != 0 })
        })
        .collect()
}

pub fn write_sites<W: Write>(sites: &[Site], out: W) -> Result<(), SitingError> {
    let mut w = csv::Writer::from_writer(out);
    for s in sites {
        w.serialize(SiteRow { station_id: s.station_id.clone(), lat: s.pos.lat, lon: s.pos.lon, existing: s.existing as u8 })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SiteProps<'a> {
    station_id: &'a str,
    status: &'static str,
    customers: usize,
}

/// Point per site with `status` open, closed or existing.
pub fn write_solution_geojson<W: Write>(inst: &SitingInstance, sol: &SitingSolution, out: W) -> Result<(), SitingError> {
    let mut load: BTreeMap<&str, usize> = BTreeMap::new();
    for s in sol.assignment.values() {
        *load.entry(s.as_str()).or_default() += 1;
    }
    let points: Vec<(LatLon, SiteProps)> = inst
        .sites
        .iter()
        .map(|s| {
            let status = if s.existing {
                "existing"
            } else if sol.open.binary_search(&s.station_id).is_ok() {
                "open"
            } else {
                "closed"
            };
            (s.pos, SiteProps { station_id: &s.station_id, status, customers: load.get(s.station_id.as_str()).copied().unwrap_or(0) })
        })
        .collect();
    write_point_features(&points, out)?;
    Ok(())
}

fn lp_name(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || "_.".contains(c) { c } else { '_' }).collect()
}

struct LpLine {
    buf: String,
    width: usize,
}

impl LpLine {
    fn new(head: String) -> Self {
        let width = head.len();
        Self { buf: head, width }
    }

    fn term(&mut self, coef: f64, var: &str) {
        let t = if coef < 0.0 { format!(" - {} {var}", -coef) } else { format!(" + {coef} {var}") };
        if self.width + t.len() > 200 {
            self.buf.push_str("\n   ");
            self.width = 3;
        }
        self.width += t.len();
        self.buf.push_str(&t);
    }

    fn finish(mut self, tail: &str) -> String {
        self.buf.push_str(tail);
        self.buf.push('\n');
        self.buf
    }
}

/// Writes the model in CPLEX LP format. Existing stations appear only when
/// considered, fixed open and outside the count row.
pub fn export_milp<W: Write>(inst: &SitingInstance, mut out: W) -> Result<(), SitingError> {
    let cands: Vec<usize> = inst.cand.clone();
    let stations: Vec<usize> = cands.iter().chain(&inst.exist).copied().collect();
    let z = |j: usize| format!("z_{}", lp_name(&inst.sites[j].station_id));
    let y = |i: usize, j: usize| format!("y_{}_{}", lp_name(&inst.customers[i].customer_id), lp_name(&inst.sites[j].station_id));
    let n = inst.customers.len();
    let mut s = String::new();
    s.push_str(&format!("\\ {} siting, p = {}, existing considered = {}\n", inst.model, inst.p, inst.consider_existing));
    s.push_str("Maximize\n");
    match inst.model {
        SitingModel::PMedian => {
            let mut line = LpLine::new(" obj:".into());
            for i in 0..n {
                for &j in &stations {
                    line.term(inst.customers[i].weight * inst.utility(i, j), &y(i, j));
                }
            }
            s.push_str(&line.finish(""));
        }
        SitingModel::MaxMin => s.push_str(" obj: alpha\n"),
    }
    s.push_str("Subject To\n");
    for i in 0..n {
        let mut line = LpLine::new(format!(" assign_{}:", i));
        for &j in &stations {
            line.term(1.0, &y(i, j));
        }
        s.push_str(&line.finish(" = 1"));
    }
    for i in 0..n {
        for &j in &stations {
            s.push_str(&format!(" open_{}_{}: {} - {} <= 0\n", i, j, y(i, j), z(j)));
        }
    }
    let mut line = LpLine::new(" count:".into());
    for &j in &cands {
        line.term(1.0, &z(j));
    }
    s.push_str(&line.finish(&format!(" = {}", inst.p)));
    if inst.model == SitingModel::MaxMin {
        for i in 0..n {
            let mut line = LpLine::new(format!(" floor_{i}: alpha"));
            for &j in &stations {
                line.term(-inst.utility(i, j), &y(i, j));
            }
            s.push_str(&line.finish(" <= 0"));
        }
    }
    s.push_str("Bounds\n");
    if inst.model == SitingModel::MaxMin {
        s.push_str(" alpha free\n");
    }
    for &j in &inst.exist {
        s.push_str(&format!(" {} = 1\n", z(j)));
    }
    s.push_str("Binaries\n");
    for &j in &cands {
        s.push_str(&format!(" {}\n", z(j)));
    }
    s.push_str("End\n");
    out.write_all(s.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn instance(n: usize, cands: usize, existing: usize, u: Vec<f64>, p: usize, consider: bool, model: SitingModel) -> SitingInstance {
        let customers = (0..n).map(|i| Customer { customer_id: format!("c{i}"), pos: LatLon::new(0.0, 0.0), weight: 1.0 }).collect();
        let sites = (0..cands + existing)
            .map(|j| Site { station_id: format!("s{j:02}"), pos: LatLon::new(0.0, 0.0), existing: j >= cands })
            .collect();
        SitingInstance::from_values(customers, sites, u, p, consider, model).unwrap()
    }

    fn random_instance(seed: u64, n: usize, cands: usize, existing: usize, p: usize, consider: bool, model: SitingModel) -> SitingInstance {
        let mut r = rng::stream(seed, &[]);
        let u = (0..n * (cands + existing)).map(|_| r.random_range(-5.0..5.0)).collect();
        instance(n, cands, existing, u, p, consider, model)
    }

    #[test]
    fn all_candidates_open() {
        let inst = random_instance(1, 6, 4, 0, 4, false, SitingModel::PMedian);
        let sol = solve_pmedian(&inst).unwrap();
        assert_eq!(sol.open.len(), 4);
        let expect: f64 = (0..6).map(|i| (0..4).map(|j| inst.utility(i, j)).fold(f64::NEG_INFINITY, f64::max)).sum();
        assert_eq!(sol.objective, expect);
    }

    #[test]
    fn small_fixtures_match_enumeration() {
        for seed in 0..20 {
            let pm = random_instance(seed, 3, 4, 0, 2, false, SitingModel::PMedian);
            let a = solve_pmedian(&pm).unwrap();
            let b = solve_exhaustive(&pm);
            assert_eq!((a.objective, &a.open), (b.objective, &b.open));
            let mm = random_instance(seed, 4, 5, 0, 2, false, SitingModel::MaxMin);
            let a = solve_maxmin(&mm).unwrap();
            let b = solve_exhaustive(&mm);
            assert_eq!((a.objective, &a.open), (b.objective, &b.open));
        }
    }

    #[test]
    fn equal_utilities_tie_to_smallest_ids() {
        let inst = instance(3, 5, 0, vec![2.5; 15], 2, false, SitingModel::PMedian);
        let sol = solve_pmedian(&inst).unwrap();
        assert_eq!(sol.objective, 7.5);
        assert_eq!(sol.open, vec!["s00", "s01"]);
        let sol = solve_maxmin(&inst.with_model(SitingModel::MaxMin)).unwrap();
        assert_eq!(sol.objective, 2.5);
        assert_eq!(sol.open, vec!["s00", "s01"]);
    }

    #[test]
    fn single_customer_models_agree() {
        let inst = random_instance(4, 1, 6, 0, 2, false, SitingModel::PMedian);
        assert_eq!(solve_pmedian(&inst).unwrap().objective, solve_maxmin(&inst).unwrap().objective);
    }

    #[test]
    fn flat_customer_caps_maxmin() {
        let mut r = rng::stream(8, &[]);
        let mut u: Vec<f64> = (0..4 * 5).map(|_| r.random_range(0.0..5.0)).collect();
        u[..5].fill(1.0);
        let inst = instance(4, 5, 0, u.clone(), 2, false, SitingModel::MaxMin);
        assert!(solve_maxmin(&inst).unwrap().objective <= 1.0);
        // everybody else can reach at least 1 with any station
        let inst = instance(4, 5, 0, u.iter().map(|v| v.max(1.0)).collect(), 2, false, SitingModel::MaxMin);
        assert_eq!(solve_maxmin(&inst).unwrap().objective, 1.0);
    }

    #[test]
    fn existing_stations_always_serve() {
        // the existing station dominates for customer 0
        let u = vec![0.0, 0.0, 9.0, 1.0, 2.0, -1.0];
        let inst = instance(2, 2, 1, u, 1, true, SitingModel::PMedian);
        let sol = solve_pmedian(&inst).unwrap();
        assert_eq!(sol.open, vec!["s01"]);
        assert_eq!(sol.assignment["c0"], "s02");
        assert_eq!(sol.objective, 11.0);
        assert_eq!(solve_exhaustive(&inst).objective, 11.0);
        let off = instance(2, 2, 1, vec![0.0, 0.0, 9.0, 1.0, 2.0, -1.0], 1, false, SitingModel::PMedian);
        assert_eq!(solve_pmedian(&off).unwrap().objective, 2.0);
    }

    #[test]
    fn infeasible_p() {
        let sites = vec![Site { station_id: "a".into(), pos: LatLon::new(0.0, 0.0), existing: false }];
        let c = vec![Customer { customer_id: "c".into(), pos: LatLon::new(0.0, 0.0), weight: 1.0 }];
        assert!(matches!(
            SitingInstance::from_values(c.clone(), sites.clone(), vec![1.0], 2, false, SitingModel::PMedian),
            Err(SitingError::InfeasibleP { .. })
        ));
        assert!(SitingInstance::from_values(c, sites, vec![1.0], 0, false, SitingModel::PMedian).is_err());
    }

    #[test]
    fn evaluation_reproduces_objective() {
        let inst = random_instance(5, 8, 6, 2, 3, true, SitingModel::PMedian);
        let sol = solve_pmedian(&inst).unwrap();
        assert_eq!(evaluate_objective(&sol.open, &inst).unwrap(), sol.objective);
        let mm = inst.with_model(SitingModel::MaxMin);
        let sol = solve_maxmin(&mm).unwrap();
        assert_eq!(evaluate_objective(&sol.open, &mm).unwrap(), sol.objective);
        assert!(evaluate_solution(&["nope".to_string(), "s00".into(), "s01".into()], &inst).is_err());
        assert!(evaluate_solution(&["s00".to_string()], &inst).is_err());
    }

    #[test]
    fn heuristics_are_flagged_and_sane() {
        let mut inst = random_instance(6, 40, 30, 0, 5, false, SitingModel::PMedian);
        inst.exact_threshold = 20;
        let heur = solve_pmedian(&inst).unwrap();
        assert_eq!(heur.solver, SolverKind::LocalSearch);
        assert!(!heur.certified);
        assert_eq!(heur.open.len(), 5);
        let greedy: Vec<usize> = greedy_pmedian(&inst).iter().map(|&q| inst.cand[q]).collect();
        assert!(heur.objective >= inst.objective_idx(&greedy));
        let mut exact = inst.clone();
        exact.exact_threshold = 30;
        let ex = solve_pmedian(&exact).unwrap();
        assert!(ex.certified && ex.objective >= heur.objective);

        let mm = inst.with_model(SitingModel::MaxMin);
        let h = solve_maxmin(&mm).unwrap();
        assert!(!h.certified);
        let mut mm_exact = mm.clone();
        mm_exact.exact_threshold = 30;
        assert!(solve_maxmin(&mm_exact).unwrap().objective >= h.objective);
    }

    #[test]
    fn candidates_respect_spacing() {
        let region = Polygon::rectangle(45.40, -75.75, 45.45, -75.65);
        let existing = vec![LatLon::new(45.42, -75.70)];
        let cfg = CandidateGenConfig { count: 60, ..CandidateGenConfig::new(region.clone(), 3) };
        let c = generate_candidates(&existing, &cfg).unwrap();
        assert_eq!(c.len(), 60);
        let pts: Vec<LatLon> = existing.iter().copied().chain(c.iter().map(|s| s.pos)).collect();
        for a in 0..pts.len() {
            assert!(pts[a] == existing[0] || region.contains(pts[a]));
            for b in a + 1..pts.len() {
                assert!(haversine_m(pts[a], pts[b]) >= 200.0);
            }
        }
        assert_eq!(generate_candidates(&existing, &cfg).unwrap(), c);
        let dense = CandidateGenConfig { count: 10_000, max_tries: 20_000, ..cfg.clone() };
        assert!(matches!(generate_candidates(&existing, &dense), Err(SitingError::TooDense { .. })));
        let empty = CandidateGenConfig::new(Polygon::new(vec![]), 1);
        assert!(matches!(generate_candidates(&[], &empty), Err(SitingError::EmptyRegion)));
    }

    #[test]
    fn lp_export_shapes() {
        let inst = instance(2, 2, 0, vec![1.0, -2.0, 0.5, 3.0], 1, false, SitingModel::PMedian);
        let mut buf = Vec::new();
        export_milp(&inst, &mut buf).unwrap();
        let lp = String::from_utf8(buf).unwrap();
        let binaries = lp.split("Binaries\n").nth(1).unwrap().lines().filter(|l| l.trim() != "End").count();
        assert_eq!(binaries, 2);
        let ys: std::collections::BTreeSet<&str> = lp.split_whitespace().filter(|t| t.starts_with("y_")).collect();
        assert_eq!(ys.len(), 4);
        assert!(lp.contains(" count: + 1 z_s00 + 1 z_s01 = 1"));
        assert!(lp.contains("- 2 y_c0_s01"));

        let mm = instance(3, 2, 1, vec![1.0; 9], 1, true, SitingModel::MaxMin);
        let mut buf = Vec::new();
        export_milp(&mm, &mut buf).unwrap();
        let lp = String::from_utf8(buf).unwrap();
        assert_eq!(lp.lines().filter(|l| l.trim_start().starts_with("floor_")).count(), 3);
        assert!(lp.contains("alpha free") && lp.contains("z_s02 = 1"));
    }

    #[test]
    fn csv_and_geojson() {
        let cs = vec![
            Customer { customer_id: "a".into(), pos: LatLon::new(45.0, -75.0), weight: 1.0 },
            Customer { customer_id: "b".into(), pos: LatLon::new(45.1, -75.1), weight: 1.0 },
        ];
        let mut buf = Vec::new();
        write_customers(&cs, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("customer_id,lat,lon\n"));
        assert_eq!(read_customers(&buf[..]).unwrap(), cs);
        let weighted = read_customers("customer_id,lat,lon,weight\nx,1,2,3.5\n".as_bytes()).unwrap();
        assert_eq!(weighted[0].weight, 3.5);

        let inst = random_instance(2, 3, 3, 1, 2, true, SitingModel::PMedian);
        let mut sites_buf = Vec::new();
        write_sites(&inst.sites, &mut sites_buf).unwrap();
        assert_eq!(read_sites(&sites_buf[..]).unwrap(), inst.sites);
        let sol = solve(&inst).unwrap();
        let mut g = Vec::new();
        write_solution_geojson(&inst, &sol, &mut g).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&g).unwrap();
        let statuses: Vec<&str> =
            v["features"].as_array().unwrap().iter().map(|f| f["properties"]["status"].as_str().unwrap()).collect();
        assert_eq!(statuses.iter().filter(|s| **s == "open").count(), 2);
        assert_eq!(statuses.iter().filter(|s| **s == "existing").count(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn exact_solvers_match_enumeration(
            seed in any::<u64>(),
            n in 1usize..=30,
            cands in 1usize..=12,
            existing in 0usize..=3,
            p_raw in 1usize..=4,
            consider in any::<bool>(),
        ) {
            let p = p_raw.min(cands);
            for model in SitingModel::ALL {
                let inst = random_instance(seed, n, cands, existing, p, consider, model);
                let a = solve(&inst).unwrap();
                let b = solve_exhaustive(&inst);
                prop_assert_eq!(a.objective, b.objective);
                prop_assert_eq!(&a.open, &b.open);
                prop_assert!(a.certified);
            }
        }

        #[test]
        fn pmedian_nondecreasing_in_p(seed in any::<u64>(), n in 1usize..=15, cands in 2usize..=8) {
            let inst = random_instance(seed, n, cands, 0, 1, false, SitingModel::PMedian);
            let mut last = f64::NEG_INFINITY;
            for p in 1..=cands {
                let v = solve_pmedian(&inst.with_p(p).unwrap()).unwrap().objective;
                prop_assert!(v >= last);
                last = v;
            }
        }

        #[test]
        fn maxmin_bounded_by_best_utility(seed in any::<u64>(), n in 1usize..=10, cands in 1usize..=8) {
            let inst = random_instance(seed, n, cands, 0, 1, false, SitingModel::MaxMin);
            let top = (0..n).flat_map(|i| (0..cands).map(move |j| (i, j))).map(|(i, j)| inst.utility(i, j)).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(solve_maxmin(&inst).unwrap().objective <= top);
        }

        #[test]
        fn assignment_is_argmax(seed in any::<u64>(), n in 1usize..=10, cands in 1usize..=8) {
            let inst = random_instance(seed, n, cands, 2, 1.max(cands / 2), true, SitingModel::PMedian);
            let sol = solve(&inst).unwrap();
            let open: Vec<usize> = sol.open.iter().map(|id| inst.site_index(id).unwrap()).chain(inst.exist.iter().copied()).collect();
            for (i, c) in inst.customers.iter().enumerate() {
                let j = inst.site_index(&sol.assignment[&c.customer_id]).unwrap();
                prop_assert!(open.contains(&j));
                prop_assert!(open.iter().all(|&k| inst.utility(i, k) <= inst.utility(i, j)));
            }
        }
    }
}
