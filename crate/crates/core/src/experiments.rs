//! Comparison harness over siting models, utility specifications, existing
//! station handling and p: solutions, active fractions, solution overlap and
//! the cross-specification optimality-gap matrix.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::hash_json;
use crate::siting::{self, Customer, Site, SitingError, SitingInstance, SitingModel, SitingSolution};
use crate::utility_sim::{UtilityMatrix, UtilitySpec};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("solutions open different numbers of stations")]
    MismatchedP,
    #[error("no solutions to compare")]
    Empty,
    #[error("no utilities for spec {0}")]
    MissingSpec(UtilitySpec),
    #[error("gap matrix needs the same specs for solutions and utilities")]
    SpecMismatch,
    #[error(transparent)]
    Siting(#[from] SitingError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentGrid {
    pub models: Vec<SitingModel>,
    pub specs: Vec<UtilitySpec>,
    pub consider_existing: Vec<bool>,
    pub ps: Vec<usize>,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        Self {
            models: SitingModel::ALL.to_vec(),
            specs: UtilitySpec::ALL.to_vec(),
            consider_existing: vec![false, true],
            ps: vec![10, 25, 50, 75, 100],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub model: SitingModel,
    pub spec: UtilitySpec,
    pub consider_existing: bool,
    pub p: usize,
}

/// Cells sharing everything but the utility spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Group {
    pub model: SitingModel,
    pub consider_existing: bool,
    pub p: usize,
}

impl Group {
    pub fn key(&self) -> String {
        format!("{}_{}_{}", self.model, if self.consider_existing { "existing" } else { "new" }, self.p)
    }
}

impl Cell {
    pub fn group(&self) -> Group {
        Group { model: self.model, consider_existing: self.consider_existing, p: self.p }
    }

    pub fn key(&self) -> String {
        let g = self.group();
        format!("{}_{}_{}_{}", g.model, self.spec, if g.consider_existing { "existing" } else { "new" }, g.p)
    }
}

impl ExperimentGrid {
    /// Model, then existing flag, then p, then spec.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &model in &self.models {
            for &consider_existing in &self.consider_existing {
                for &p in &self.ps {
                    for &spec in &self.specs {
                        out.push(Cell { model, spec, consider_existing, p });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityScope {
    All,
    /// Only the MXL-Mean / MXL-25 pair.
    MxlPair,
}

/// Mean over unordered spec pairs in scope of `|S_a ∩ S_b| / p`. `None`
/// when the scope holds fewer than two specs.
pub fn similarity(
    solutions: &BTreeMap<UtilitySpec, Vec<String>>,
    scope: SimilarityScope,
) -> Result<Option<f64>, ExperimentError> {
    let specs: Vec<&UtilitySpec> = solutions
        .keys()
        .filter(|s| scope == SimilarityScope::All || matches!(s, UtilitySpec::MxlMean | UtilitySpec::Mxl25))
        .collect();
    let Some(first) = specs.first() else { return Ok(None) };
    let p = solutions[first].len();
    if specs.iter().any(|s| solutions[s].len() != p) {
        return Err(ExperimentError::MismatchedP);
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..specs.len() {
        let sa: std::collections::HashSet<&String> = solutions[specs[a]].iter().collect();
        for b in a + 1..specs.len() {
            let common = solutions[specs[b]].iter().filter(|s| sa.contains(s)).count();
            total += common as f64 / p as f64;
            pairs += 1;
        }
    }
    Ok((pairs > 0).then(|| total / pairs as f64))
}

/// Fraction of the opened stations that are the best station (within the
/// open set plus considered existing stations) of at least one customer.
pub fn active_fraction(open: &[String], inst: &SitingInstance) -> Result<f64, ExperimentError> {
    if open.is_empty() {
        return Ok(0.0);
    }
    let assignment = siting::reassign(open, inst)?;
    let used: std::collections::HashSet<&str> = assignment.values().map(String::as_str).collect();
    Ok(open.iter().filter(|s| used.contains(s.as_str())).count() as f64 / open.len() as f64)
}

/// Optimality gaps in percent. `values[i][j]` is the objective of spec i's
/// solution under spec j's utilities; `gaps[i][j]` compares it with
/// `values[j][j]`, and is `None` when that own objective is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapMatrix {
    pub specs: Vec<UtilitySpec>,
    pub values: Vec<Vec<f64>>,
    pub gaps: Vec<Vec<Option<f64>>>,
}

impl GapMatrix {
    /// Each spec's own optimal objective.
    pub fn objectives(&self) -> Vec<f64> {
        (0..self.specs.len()).map(|i| self.values[i][i]).collect()
    }

    pub fn gap(&self, solution: UtilitySpec, evaluation: UtilitySpec) -> Option<f64> {
        let i = self.specs.iter().position(|&s| s == solution)?;
        let j = self.specs.iter().position(|&s| s == evaluation)?;
        self.gaps[i][j]
    }

    /// One row per solution spec: the gap under every evaluation spec, then
    /// the row's own objective. Undefined gaps are written as `NA`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ExperimentError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["solution".to_string()];
        header.extend(self.specs.iter().map(|s| s.to_string()));
        header.push("objective".into());
        w.write_record(&header)?;
        for (i, s) in self.specs.iter().enumerate() {
            let mut rec = vec![s.to_string()];
            rec.extend(self.gaps[i].iter().map(|g| g.map_or_else(|| "NA".to_string(), |v| v.to_string())));
            rec.push(self.values[i][i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Gaps from a precomputed cross-evaluation table.
pub fn gap_matrix_from_values(specs: Vec<UtilitySpec>, values: Vec<Vec<f64>>) -> GapMatrix {
    let n = specs.len();
    assert!(values.len() == n && values.iter().all(|r| r.len() == n), "square value table");
    let gaps = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let own = values[j][j];
                    if i == j {
                        Some(0.0)
                    } else if own == 0.0 {
                        None
                    } else {
                        Some(100.0 * (own - values[i][j]) / own.abs())
                    }
                })
                .collect()
        })
        .collect();
    GapMatrix { specs, values, gaps }
}

/// Evaluates every spec's solution under every spec's instance.
pub fn gap_matrix(
    solutions: &BTreeMap<UtilitySpec, SitingSolution>,
    instances: &BTreeMap<UtilitySpec, SitingInstance>,
) -> Result<GapMatrix, ExperimentError> {
    if solutions.is_empty() {
        return Err(ExperimentError::Empty);
    }
    if !solutions.keys().eq(instances.keys()) {
        return Err(ExperimentError::SpecMismatch);
    }
    let specs: Vec<UtilitySpec> = solutions.keys().copied().collect();
    let values = specs
        .iter()
        .map(|si| specs.iter().map(|sj| siting::evaluate_objective(&solutions[si].open, &instances[sj])).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    Ok(gap_matrix_from_values(specs, values))
}

/// Everything the grid needs besides the cell list.
#[derive(Debug, Clone)]
pub struct ExperimentInputs {
    pub customers: Vec<Customer>,
    pub sites: Vec<Site>,
    pub utilities: BTreeMap<UtilitySpec, UtilityMatrix>,
    pub exact_threshold: usize,
}

impl ExperimentInputs {
    pub fn instance(&self, cell: &Cell) -> Result<SitingInstance, ExperimentError> {
        let u = self.utilities.get(&cell.spec).ok_or(ExperimentError::MissingSpec(cell.spec))?;
        let mut inst =
            SitingInstance::new(self.customers.clone(), self.sites.clone(), u, cell.p, cell.consider_existing, cell.model)?;
        inst.exact_threshold = self.exact_threshold;
        Ok(inst)
    }

    /// Hash of everything that determines a cell's result.
    fn cell_hash(&self, cell: &Cell) -> Result<String, ExperimentError> {
        let u = self.utilities.get(&cell.spec).ok_or(ExperimentError::MissingSpec(cell.spec))?;
        Ok(hash_json(&(
            cell,
            &self.customers,
            &self.sites,
            (&u.customers, &u.stations, &u.values),
            self.exact_threshold,
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub input_hash: String,
    pub solution: SitingSolution,
    pub active_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub cells: Vec<CellResult>,
    pub gaps: BTreeMap<Group, GapMatrix>,
    pub similarity_all: BTreeMap<Group, Option<f64>>,
    pub similarity_mxl: BTreeMap<Group, Option<f64>>,
    /// Cells loaded from earlier runs rather than solved.
    pub reused: usize,
}

fn cell_path(dir: &Path, cell: &Cell) -> PathBuf {
    dir.join("cells").join(format!("{}.json", cell.key()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}

/// Solves every cell in parallel, persisting each as
/// `cells/<key>.json` under `out_dir`. Cells whose artifact already holds
/// the same input hash are loaded instead of solved, so an interrupted
/// run resumes where it stopped. Then writes `grid.csv` and one
/// `gaps_<model>_<existing>_<p>.csv` per group.
pub fn run_grid(inputs: &ExperimentInputs, grid: &ExperimentGrid, out_dir: &Path) -> Result<GridReport, ExperimentError> {
    std::fs::create_dir_all(out_dir.join("cells"))?;
    let cells = grid.cells();
    let results: Vec<(CellResult, bool)> = cells
        .par_iter()
        .map(|cell| -> Result<(CellResult, bool), ExperimentError> {
            let hash = inputs.cell_hash(cell)?;
            let path = cell_path(out_dir, cell);
            if let Ok(text) = std::fs::read_to_string(&path) {
                if let Ok(prev) = serde_json::from_str::<CellResult>(&text) {
                    if prev.input_hash == hash && prev.cell == *cell {
                        return Ok((prev, true));
                    }
                }
            }
            let inst = inputs.instance(cell)?;
            let solution = siting::solve(&inst)?;
            let active_fraction = active_fraction(&solution.open, &inst)?;
            let res = CellResult { cell: *cell, input_hash: hash, solution, active_fraction };
            let mut text = serde_json::to_string_pretty(&res)?;
            text.push('\n');
            write_atomic(&path, text.as_bytes())?;
            Ok((res, false))
        })
        .collect::<Result<_, _>>()?;
    let reused = results.iter().filter(|r| r.1).count();
    let cells: Vec<CellResult> = results.into_iter().map(|r| r.0).collect();
    let report = aggregate(inputs, cells, reused)?;
    write_reports(&report, out_dir)?;
    Ok(report)
}

/// Pure aggregation of solved cells into gap matrices and similarities.
pub fn aggregate(inputs: &ExperimentInputs, cells: Vec<CellResult>, reused: usize) -> Result<GridReport, ExperimentError> {
    let mut groups: BTreeMap<Group, BTreeMap<UtilitySpec, &CellResult>> = BTreeMap::new();
    for c in &cells {
        groups.entry(c.cell.group()).or_default().insert(c.cell.spec, c);
    }
    let mut gaps = BTreeMap::new();
    let mut similarity_all = BTreeMap::new();
    let mut similarity_mxl = BTreeMap::new();
    for (g, members) in &groups {
        let open: BTreeMap<UtilitySpec, Vec<String>> = members.iter().map(|(s, c)| (*s, c.solution.open.clone())).collect();
        similarity_all.insert(*g, similarity(&open, SimilarityScope::All)?);
        similarity_mxl.insert(*g, similarity(&open, SimilarityScope::MxlPair)?);
        let sols: BTreeMap<UtilitySpec, SitingSolution> = members.iter().map(|(s, c)| (*s, c.solution.clone())).collect();
        let insts = members.values().map(|c| Ok((c.cell.spec, inputs.instance(&c.cell)?))).collect::<Result<BTreeMap<_, _>, ExperimentError>>()?;
        gaps.insert(*g, gap_matrix(&sols, &insts)?);
    }
    Ok(GridReport { cells, gaps, similarity_all, similarity_mxl, reused })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

pub fn write_reports(report: &GridReport, out_dir: &Path) -> Result<(), ExperimentError> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record([
            "model",
            "spec",
            "consider_existing",
            "p",
            "objective",
            "active_fraction",
            "similarity_all",
            "similarity_mxl",
            "solver",
            "certified",
        ])?;
        for c in &report.cells {
            let g = c.cell.group();
            w.write_record([
                c.cell.model.to_string(),
                c.cell.spec.to_string(),
                c.cell.consider_existing.to_string(),
                c.cell.p.to_string(),
                c.solution.objective.to_string(),
                c.active_fraction.to_string(),
                opt(report.similarity_all.get(&g).copied().flatten()),
                opt(report.similarity_mxl.get(&g).copied().flatten()),
                format!("{:?}", c.solution.solver),
                c.solution.certified.to_string(),
            ])?;
        }
        w.flush()?;
    }
    write_atomic(&out_dir.join("grid.csv"), &buf)?;
    for (g, m) in &report.gaps {
        let mut buf = Vec::new();
        m.write_csv(&mut buf)?;
        write_atomic(&out_dir.join(format!("gaps_{}.csv", g.key())), &buf)?;
    }
    Ok(())
}
