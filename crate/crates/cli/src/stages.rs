//! One function per subcommand. Every stage writes its artifacts plus a
//! `<stage>.manifest.json` into its output directory.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use chrono::{DateTime, TimeZone, Utc};
use serde::Serialize;
use serde_json::json;

use chargechoice::accounts::{
    classify_account, filter_private_region, load_accounts, write_accounts, write_classifications, write_sessions,
    Account, AccountClass,
};
use chargechoice::artifact::{hash_file, sha256_hex, RunManifest};
use chargechoice::choice::{read_observations, write_observations, ModelKind, PanelDataset, ParameterSet};
use chargechoice::config::Config;
use chargechoice::estimation::{fit_folds, grouped_kfold, trim_distance_outliers, validate_folds, FoldPlan};
use chargechoice::experiments::{run_grid, ExperimentGrid, ExperimentInputs};
use chargechoice::geo::{LatLon, Polygon};
use chargechoice::metrics::{ratio_table, write_indicator_csv, IndicatorReport};
use chargechoice::siting::{
    export_milp as write_lp, generate_candidates, read_customers, read_sites, solve, write_customers, write_sites,
    write_solution_geojson, Customer, Site, SitingInstance,
};
use chargechoice::spatial::io::{load_amenity_archive, load_network, read_stations};
use chargechoice::spatial::{encode_sessions, AmenityArchive, ChoiceSetBuilder, RoadNetwork, StationSnapshot};
use chargechoice::synth::{generate_world, write_world};
use chargechoice::utility_sim::{
    distance_utilities, grid_distances, pair_attributes, simulate_mnl_utilities, simulate_mxl_utilities, Provenance,
    Statistic, UtilityMatrix, UtilitySpec,
};
use chargechoice::Level;

use crate::{
    ClassifyArgs, CompareArgs, EncodeArgs, EstimateArgs, NetworkArgs, OptimizeArgs, SimulateArgs, SynthArgs,
    ValidateArgs, ValidationFailure,
};

pub struct Context {
    pub seed: u64,
    pub config: Config,
}

/// Output directory plus the manifest being filled in.
struct Stage {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Stage {
    fn new(ctx: &Context, name: &str, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), manifest: RunManifest::new(name, ctx.seed, ctx.config.hash()) })
    }

    fn input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.manifest.add_input(label, path).with_context(|| format!("reading {}", path.display()))
    }

    /// Hashes every file below `dir` under `label/<relative path>`.
    fn input_dir(&mut self, label: &str, dir: &Path) -> Result<()> {
        for (rel, path) in files_below(dir)? {
            self.input(&format!("{label}/{rel}"), &path)?;
        }
        Ok(())
    }

    fn output(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.outputs.insert(name.into(), sha256_hex(bytes));
        Ok(())
    }

    /// Records a file some library call already wrote.
    fn written(&mut self, name: &str) -> Result<()> {
        let path = self.dir.join(name);
        self.manifest.outputs.insert(name.into(), hash_file(&path).with_context(|| format!("reading {}", path.display()))?);
        Ok(())
    }

    fn finish(mut self, summary: serde_json::Value) -> Result<RunManifest> {
        self.manifest.summary = summary;
        let path = self.dir.join(format!("{}.manifest.json", self.manifest.stage));
        self.manifest.write(&path).with_context(|| format!("writing {}", path.display()))?;
        Ok(self.manifest)
    }
}

fn files_below(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("reading {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).expect("below dir").to_string_lossy().replace('\\', "/");
                out.push((rel, path));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).with_context(|| format!("opening {}", path.display()))
}

fn to_bytes<F, E>(write: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut Vec<u8>) -> std::result::Result<(), E>,
    E: std::error::Error + Send + Sync + 'static,
{
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

fn pretty_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn read_region(path: &Path) -> Result<Polygon> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing region {}", path.display()))
}

fn read_station_file(path: &Path) -> Result<Vec<StationSnapshot>> {
    read_stations(open(path)?).with_context(|| format!("parsing stations {}", path.display()))
}

struct Spatial {
    stations: Vec<StationSnapshot>,
    net: RoadNetwork,
    archive: AmenityArchive,
}

fn load_spatial(stage: &mut Stage, a: &NetworkArgs) -> Result<Spatial> {
    stage.input("stations", &a.stations)?;
    stage.input("nodes", &a.nodes)?;
    stage.input("network", &a.network)?;
    stage.input_dir("amenities", &a.amenities)?;
    Ok(Spatial {
        stations: read_station_file(&a.stations)?,
        net: load_network(&a.nodes, &a.network).context("loading the road network")?,
        archive: load_amenity_archive(&a.amenities).context("loading amenity snapshots")?,
    })
}

fn load_account_files(stage: &mut Stage, accounts: &Path, sessions: &Path) -> Result<Vec<Account>> {
    stage.input("accounts", accounts)?;
    stage.input("sessions", sessions)?;
    Ok(load_accounts(accounts, sessions)?)
}

pub fn classify(ctx: &Context, a: &ClassifyArgs) -> Result<RunManifest> {
    let cfg = &ctx.config;
    let mut stage = Stage::new(ctx, "classify", &a.out)?;
    let accounts = load_account_files(&mut stage, &a.accounts, &a.sessions)?;
    stage.input("stations", &a.stations)?;
    stage.input("region", &a.region)?;
    let stations = read_station_file(&a.stations)?;
    let region = read_region(&a.region)?;

    let rows: Vec<(String, _)> = accounts
        .iter()
        .map(|acct| (acct.account_id.clone(), classify_account(acct, &cfg.exclusion_window, &cfg.classifier)))
        .collect();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for (_, c) in &rows {
        *counts.entry(format!("{:?}", c.class).to_lowercase()).or_default() += 1;
    }
    let private = accounts.iter().zip(&rows).filter(|(_, (_, c))| c.class == AccountClass::Private).map(|(acct, _)| acct);
    let in_region: HashSet<String> =
        stations.iter().filter(|s| region.contains(s.pos)).map(|s| s.station_id.clone()).collect();
    let kept: Vec<Account> =
        filter_private_region(private, &region, &in_region, cfg.region.max_daily_sessions).into_iter().cloned().collect();
    let sessions: Vec<_> = kept.iter().flat_map(|acct| &acct.sessions).collect();

    stage.output("classifications.csv", &to_bytes(|w| write_classifications(&rows, w))?)?;
    stage.output("private_accounts.csv", &to_bytes(|w| write_accounts(&kept, w))?)?;
    stage.output("private_sessions.csv", &to_bytes(|w| write_sessions(sessions.iter().copied(), w))?)?;
    stage.finish(json!({
        "accounts": accounts.len(),
        "classes": counts,
        "private_in_region": kept.len(),
        "private_sessions": sessions.len(),
    }))
}

pub fn encode(ctx: &Context, a: &EncodeArgs) -> Result<RunManifest> {
    let cfg = &ctx.config;
    let mut stage = Stage::new(ctx, "encode", &a.out)?;
    let accounts = load_account_files(&mut stage, &a.accounts, &a.sessions)?;
    let sp = load_spatial(&mut stage, &a.net)?;
    let builder = ChoiceSetBuilder::new(&sp.stations, &sp.archive, a.level, &cfg.encoding);
    let (obs, report) = encode_sessions(&accounts, &builder, &sp.net, Some(&cfg.exclusion_window))?;
    let data = PanelDataset::from_observations(obs)?;
    stage.output("observations.csv", &to_bytes(|w| write_observations(&data, w))?)?;
    stage.finish(json!({
        "level": a.level.to_string(),
        "report": report,
        "users": data.n_users(),
        "observations": data.n_observations(),
    }))
}

fn load_observations(stage: &mut Stage, path: &Path, quantile: f64) -> Result<(PanelDataset, Option<f64>)> {
    stage.input("observations", path)?;
    let data = read_observations(open(path)?).with_context(|| format!("parsing observations {}", path.display()))?;
    Ok(trim_distance_outliers(&data, quantile))
}

#[derive(Serialize)]
struct FoldFit {
    fold: usize,
    status: chargechoice::estimation::FitStatus,
    stop: chargechoice::optim::StopReason,
    iterations: usize,
    grad_norm: f64,
    ll_null: f64,
    ll_final: f64,
    n_obs: usize,
    /// `None` where the information matrix gives no standard error.
    std_errors: Vec<Option<f64>>,
    non_identified: Vec<&'static str>,
}

fn params_file(fold: usize) -> String {
    format!("params_fold{fold}.txt")
}

pub fn estimate(ctx: &Context, a: &EstimateArgs) -> Result<RunManifest> {
    let est = ctx.config.estimation_for(a.level, ctx.seed);
    let mut stage = Stage::new(ctx, "estimate", &a.out)?;
    let (data, cutoff) = load_observations(&mut stage, &a.observations, est.outlier_quantile)?;
    let plan = match &a.fold_plan {
        Some(path) => {
            stage.input("fold_plan", path)?;
            FoldPlan::load(path)?
        }
        None => grouped_kfold(&data.counts(), est.folds, ctx.seed)?,
    };
    let fits = fit_folds(&data, &plan, a.model, &est)?;

    stage.output("fold_plan.json", &pretty_json(&plan)?)?;
    let mut reports = Vec::new();
    let mut summaries = Vec::new();
    for (fold, r) in fits.iter().enumerate() {
        stage.output(&params_file(fold), r.params.to_kv().as_bytes())?;
        reports.push(IndicatorReport { indicators: r.indicators()?, dpsa: BTreeMap::new() });
        summaries.push(FoldFit {
            fold,
            status: r.status,
            stop: r.stop,
            iterations: r.iterations,
            grad_norm: r.grad_norm,
            ll_null: r.ll_null,
            ll_final: r.ll_final,
            n_obs: r.n_obs,
            std_errors: r.std_errors.iter().map(|s| s.is_finite().then_some(*s)).collect(),
            non_identified: r.non_identified.iter().map(|c| c.name()).collect(),
        });
    }
    stage.output("fits.json", &pretty_json(&summaries)?)?;
    stage.output("estimation_indicators.csv", &to_bytes(|w| write_indicator_csv(&reports, w))?)?;
    let params: Vec<ParameterSet> = fits.iter().map(|r| r.params.clone()).collect();
    let ratios = ratio_table(&params).ok();
    if let Some(t) = &ratios {
        stage.output("ratios.csv", &to_bytes(|w| t.write_csv(w))?)?;
    }
    stage.finish(json!({
        "model": a.model.to_string(),
        "level": a.level.to_string(),
        "folds": plan.k,
        "users": data.n_users(),
        "observations": data.n_observations(),
        "distance_cutoff_km": cutoff,
        "status": summaries.iter().map(|s| s.status).collect::<Vec<_>>(),
        "ratios_written": ratios.is_some(),
    }))
}

/// Level and fold parameters written by `estimate`.
fn read_estimates(dir: &Path) -> Result<(Level, FoldPlan, Vec<ParameterSet>)> {
    let manifest = RunManifest::read(&dir.join("estimate.manifest.json"))
        .with_context(|| format!("{} is not an estimate output directory", dir.display()))?;
    let level: Level = manifest.summary["level"]
        .as_str()
        .context("estimate manifest has no level")?
        .parse()?;
    let plan = FoldPlan::load(&dir.join("fold_plan.json"))?;
    let params = (0..plan.k)
        .map(|f| {
            let path = dir.join(params_file(f));
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            ParameterSet::from_kv(&text).with_context(|| format!("parsing {}", path.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((level, plan, params))
}

pub fn validate(ctx: &Context, a: &ValidateArgs) -> Result<RunManifest> {
    let (level, plan, params) = read_estimates(&a.estimates)?;
    let est = ctx.config.estimation_for(level, ctx.seed);
    let mut stage = Stage::new(ctx, "validate", &a.out)?;
    stage.input("fold_plan", &a.estimates.join("fold_plan.json"))?;
    for f in 0..plan.k {
        stage.input(&params_file(f), &a.estimates.join(params_file(f)))?;
    }
    let (data, _) = load_observations(&mut stage, &a.observations, est.outlier_quantile)?;

    if let Err(e) = plan.check(&data) {
        return Err(ValidationFailure(e.to_string()).into());
    }
    for f in 0..plan.k {
        let split = plan.split(&data, f, est.mode, est.sample_size)?;
        if split.estimation_users.iter().any(|u| split.validation_users.contains(u)) {
            return Err(ValidationFailure(format!("fold {f}: a user is in both estimation and validation sets")).into());
        }
        if split.validation.len() != split.validation_users.len() {
            return Err(ValidationFailure(format!("fold {f}: not one validation observation per user")).into());
        }
    }
    let reports = validate_folds(&data, &plan, &params, &est)?;
    stage.output("validation_indicators.csv", &to_bytes(|w| write_indicator_csv(&reports, w))?)?;
    if let Some(f) = reports.iter().position(|r| !r.indicators.ll_final.is_finite()) {
        stage.finish(json!({ "failed_fold": f }))?;
        return Err(ValidationFailure(format!("fold {f}: non-finite validation log-likelihood")).into());
    }
    stage.finish(json!({
        "level": level.to_string(),
        "folds": plan.k,
        "rho": reports.iter().map(|r| r.indicators.rho).collect::<Vec<_>>(),
    }))
}

/// The first day of the latest amenity snapshot month.
fn default_reference_time(archive: &AmenityArchive) -> Result<DateTime<Utc>> {
    let ym = archive.snapshots.keys().next_back().context("no amenity snapshots")?;
    Utc.with_ymd_and_hms(ym.year, ym.month, 1, 0, 0, 0).single().context("invalid snapshot month")
}

pub fn simulate(ctx: &Context, a: &SimulateArgs) -> Result<RunManifest> {
    let cfg = &ctx.config;
    let mut stage = Stage::new(ctx, "simulate", &a.out)?;
    stage.input("customers", &a.customers)?;
    stage.input("region", &a.region)?;
    let customers = read_customers(open(&a.customers)?)?;
    let region = read_region(&a.region)?;
    let sp = load_spatial(&mut stage, &a.net)?;
    let at = match cfg.simulation.reference_time {
        Some(t) => t,
        None => default_reference_time(&sp.archive)?,
    };

    let enc = &cfg.encoding;
    let existing: Vec<&StationSnapshot> = sp
        .stations
        .iter()
        .filter(|s| s.level == a.level && !enc.excluded_operators.contains(&s.operator) && s.outlets_at(at) > 0)
        .collect();
    let all_positions: Vec<LatLon> = sp.stations.iter().map(|s| s.pos).collect();
    let candidates = generate_candidates(&all_positions, &cfg.candidates_for(region, ctx.seed))?;
    let mut sites: Vec<Site> =
        existing.iter().map(|s| Site { station_id: s.station_id.clone(), pos: s.pos, existing: true }).collect();
    sites.extend(candidates.iter().cloned());

    let mut snapshots: Vec<StationSnapshot> = existing.iter().map(|s| (*s).clone()).collect();
    let installs = vec![at; cfg.simulation.candidate_outlets as usize];
    snapshots.extend(candidates.iter().map(|c| StationSnapshot::new(c.station_id.clone(), c.pos, a.level).with_installs(&installs)));
    let builder = ChoiceSetBuilder::new(&snapshots, &sp.archive, a.level, enc);
    let homes: Vec<(String, LatLon)> = customers.iter().map(|c| (c.customer_id.clone(), c.pos)).collect();
    let ids: Vec<String> = sites.iter().map(|s| s.station_id.clone()).collect();
    let grid = pair_attributes(&homes, &builder, &ids, &sp.net, at)?;

    let mut matrices: Vec<UtilityMatrix> = Vec::new();
    let mut distance = distance_utilities(grid.customers.clone(), grid.stations.clone(), &grid_distances(&grid))?;
    distance.provenance = Provenance { spec: UtilitySpec::Distance, seed: ctx.seed, config_hash: cfg.hash() };
    matrices.push(distance);
    let mut fold_counts = BTreeMap::new();
    if let Some(dir) = &a.mnl {
        let params = load_fold_params(&mut stage, "mnl", dir, ModelKind::Mnl)?;
        fold_counts.insert("mnl", params.len());
        matrices.push(simulate_mnl_utilities(&grid, &cfg.simulation_for(params, ctx.seed))?);
    }
    if let Some(dir) = &a.mxl {
        let params = load_fold_params(&mut stage, "mxl", dir, ModelKind::Mxl)?;
        fold_counts.insert("mxl", params.len());
        let sim = cfg.simulation_for(params, ctx.seed);
        matrices.push(simulate_mxl_utilities(&grid, &sim, Statistic::Mean)?);
        matrices.push(simulate_mxl_utilities(&grid, &sim, Statistic::Percentile(cfg.simulation.percentile))?);
    }

    stage.output("customers.csv", &to_bytes(|w| write_customers(&customers, w))?)?;
    stage.output("sites.csv", &to_bytes(|w| write_sites(&sites, w))?)?;
    for m in &matrices {
        stage.output(&utilities_file(m.provenance.spec), &to_bytes(|w| m.write_csv(w))?)?;
    }
    stage.finish(json!({
        "level": a.level.to_string(),
        "reference_time": at,
        "customers": customers.len(),
        "existing_sites": existing.len(),
        "candidates": candidates.len(),
        "specs": matrices.iter().map(|m| m.provenance.spec.name()).collect::<Vec<_>>(),
        "folds": fold_counts,
    }))
}

fn utilities_file(spec: UtilitySpec) -> String {
    format!("utilities_{spec}.csv")
}

fn load_fold_params(stage: &mut Stage, label: &str, dir: &Path, kind: ModelKind) -> Result<Vec<ParameterSet>> {
    let (_, plan, params) = read_estimates(dir)?;
    for f in 0..plan.k {
        stage.input(&format!("{label}/{}", params_file(f)), &dir.join(params_file(f)))?;
    }
    if let Some(p) = params.iter().find(|p| p.model_kind != kind) {
        bail!("{} holds {} folds, expected {kind}", dir.display(), p.model_kind);
    }
    Ok(params)
}

/// Customers, sites and the available utility matrices of a `simulate` run.
fn load_siting_inputs(stage: &mut Stage, dir: &Path, exact_threshold: usize) -> Result<ExperimentInputs> {
    let manifest = RunManifest::read(&dir.join("simulate.manifest.json"))
        .with_context(|| format!("{} is not a simulate output directory", dir.display()))?;
    let customers_path = dir.join("customers.csv");
    let sites_path = dir.join("sites.csv");
    stage.input("customers", &customers_path)?;
    stage.input("sites", &sites_path)?;
    let customers: Vec<Customer> = read_customers(open(&customers_path)?)?;
    let sites: Vec<Site> = read_sites(open(&sites_path)?)?;
    let mut utilities = BTreeMap::new();
    for spec in UtilitySpec::ALL {
        let path = dir.join(utilities_file(spec));
        if !path.exists() {
            continue;
        }
        stage.input(&utilities_file(spec), &path)?;
        let provenance = Provenance { spec, seed: manifest.seed, config_hash: manifest.config_hash.clone() };
        let m = UtilityMatrix::read_csv(open(&path)?, provenance).with_context(|| format!("parsing {}", path.display()))?;
        utilities.insert(spec, m);
    }
    Ok(ExperimentInputs { customers, sites, utilities, exact_threshold })
}

fn siting_instance(ctx: &Context, stage: &mut Stage, a: &OptimizeArgs) -> Result<SitingInstance> {
    let inputs = load_siting_inputs(stage, &a.input, ctx.config.siting.exact_threshold)?;
    let cell = chargechoice::experiments::Cell {
        model: a.model,
        spec: a.utilities,
        consider_existing: a.consider_existing,
        p: a.p,
    };
    Ok(inputs.instance(&cell)?)
}

pub fn optimize(ctx: &Context, a: &OptimizeArgs) -> Result<RunManifest> {
    let mut stage = Stage::new(ctx, "optimize", &a.out)?;
    let inst = siting_instance(ctx, &mut stage, a)?;
    let sol = solve(&inst)?;
    stage.output("solution.json", &pretty_json(&sol)?)?;
    stage.output("solution.geojson", &to_bytes(|w| write_solution_geojson(&inst, &sol, w))?)?;
    stage.finish(json!({
        "model": a.model.name(),
        "utilities": a.utilities.name(),
        "p": a.p,
        "consider_existing": a.consider_existing,
        "objective": sol.objective,
        "open": sol.open,
        "solver": format!("{:?}", sol.solver),
        "certified": sol.certified,
    }))
}

pub fn export_milp(ctx: &Context, a: &OptimizeArgs) -> Result<RunManifest> {
    let mut stage = Stage::new(ctx, "export-milp", &a.out)?;
    let inst = siting_instance(ctx, &mut stage, a)?;
    stage.output("model.lp", &to_bytes(|w| write_lp(&inst, w))?)?;
    stage.finish(json!({
        "model": a.model.name(),
        "utilities": a.utilities.name(),
        "p": a.p,
        "consider_existing": a.consider_existing,
        "candidates": inst.n_candidates(),
    }))
}

pub fn compare(ctx: &Context, a: &CompareArgs) -> Result<RunManifest> {
    let mut grid: ExperimentGrid = ctx.config.grid.clone();
    if !a.p.is_empty() {
        grid.ps = a.p.clone();
    }
    if !a.model.is_empty() {
        grid.models = a.model.clone();
    }
    let mut stage = Stage::new(ctx, "compare", &a.out)?;
    let inputs = load_siting_inputs(&mut stage, &a.input, ctx.config.siting.exact_threshold)?;
    if let Some(missing) = grid.specs.iter().find(|s| !inputs.utilities.contains_key(s)) {
        bail!("{} has no utilities for {missing}", a.input.display());
    }
    let report = run_grid(&inputs, &grid, &a.out)?;
    stage.written("grid.csv")?;
    for g in report.gaps.keys() {
        stage.written(&format!("gaps_{}.csv", g.key()))?;
    }
    for c in &report.cells {
        stage.written(&format!("cells/{}.json", c.cell.key()))?;
    }
    let uncertified = report.cells.iter().filter(|c| !c.solution.certified).count();
    stage.finish(json!({
        "cells": report.cells.len(),
        "reused": report.reused,
        "groups": report.gaps.len(),
        "uncertified": uncertified,
    }))
}

pub fn synth(ctx: &Context, a: &SynthArgs) -> Result<RunManifest> {
    let world = generate_world(&ctx.config.world_for(ctx.seed))?;
    let mut stage = Stage::new(ctx, "synth", &a.out)?;
    write_world(&world, &a.out)?;
    for (rel, _) in files_below(&a.out)? {
        if !rel.ends_with(".manifest.json") {
            stage.written(&rel)?;
        }
    }
    stage.finish(json!({
        "accounts": world.accounts.len(),
        "stations": world.stations.len(),
        "customers": world.customers.len(),
        "observations": world.observations.iter().map(|(l, o)| (l.to_string(), o.len())).collect::<BTreeMap<_, _>>(),
    }))
}
