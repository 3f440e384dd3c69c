//! `chargechoice`: the station-choice and siting pipeline from the command line.
//!
//! Exit codes: 0 on success, 1 when a validation check fails, 2 on I/O,
//! configuration or usage errors.

mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use chargechoice::choice::ModelKind;
use chargechoice::config::Config;
use chargechoice::siting::SitingModel;
use chargechoice::utility_sim::UtilitySpec;
use chargechoice::Level;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "chargechoice", version, about = "Station-choice estimation and charging-network siting")]
struct Cli {
    /// Seed for every random stream of the stage.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the run manifest as JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Classify accounts and keep the private, in-region ones.
    Classify(ClassifyArgs),
    /// Turn private sessions into choice observations.
    Encode(EncodeArgs),
    /// Fit one model per cross-validation fold.
    Estimate(EstimateArgs),
    /// Validation indicators of fitted folds.
    Validate(ValidateArgs),
    /// Candidate sites and customer-station utilities of every specification.
    Simulate(SimulateArgs),
    /// Solve one siting problem.
    Optimize(OptimizeArgs),
    /// Solve the experiment grid and write gap matrices.
    Compare(CompareArgs),
    /// Write a synthetic world in the pipeline's input formats.
    Synth(SynthArgs),
    /// Write a siting problem as a MILP in LP format.
    ExportMilp(OptimizeArgs),
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[arg(long)]
    accounts: PathBuf,
    #[arg(long)]
    sessions: PathBuf,
    /// Stations GeoJSON; stations inside the region count as in-region.
    #[arg(long)]
    stations: PathBuf,
    /// Region polygon JSON.
    #[arg(long)]
    region: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct NetworkArgs {
    #[arg(long)]
    stations: PathBuf,
    #[arg(long)]
    nodes: PathBuf,
    #[arg(long)]
    network: PathBuf,
    /// Directory of monthly amenity snapshots.
    #[arg(long)]
    amenities: PathBuf,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    accounts: PathBuf,
    #[arg(long)]
    sessions: PathBuf,
    #[command(flatten)]
    net: NetworkArgs,
    /// Charging level: 2 or 3.
    #[arg(long)]
    level: Level,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    observations: PathBuf,
    /// mnl or mxl.
    #[arg(long)]
    model: ModelKind,
    /// Level 2 uses sampled estimation sets, level 3 leave-group-out folds.
    #[arg(long)]
    level: Level,
    /// Reuse a fold plan instead of drawing one from the seed.
    #[arg(long)]
    fold_plan: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    observations: PathBuf,
    /// Output directory of `estimate`.
    #[arg(long)]
    estimates: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    customers: PathBuf,
    #[arg(long)]
    region: PathBuf,
    #[command(flatten)]
    net: NetworkArgs,
    #[arg(long)]
    level: Level,
    /// `estimate` output with MNL folds.
    #[arg(long)]
    mnl: Option<PathBuf>,
    /// `estimate` output with MXL folds.
    #[arg(long)]
    mxl: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct OptimizeArgs {
    /// Output directory of `simulate`.
    #[arg(long)]
    input: PathBuf,
    /// distance, mnl, mxl-mean or mxl-25.
    #[arg(long)]
    utilities: UtilitySpec,
    /// pmedian or maxmin.
    #[arg(long)]
    model: SitingModel,
    #[arg(long)]
    p: usize,
    /// Existing stations stay open and compete for customers.
    #[arg(long)]
    consider_existing: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Output directory of `simulate`.
    #[arg(long)]
    input: PathBuf,
    /// Station counts, overriding the configured grid.
    #[arg(long, value_delimiter = ',')]
    p: Vec<usize>,
    /// Siting models, overriding the configured grid.
    #[arg(long, value_delimiter = ',')]
    model: Vec<SitingModel>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
}

/// A check on the data failed, as opposed to a problem reading it.
#[derive(Debug, thiserror::Error)]
#[error("validation failed: {0}")]
pub struct ValidationFailure(pub String);

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        anyhow::ensure!(jobs > 0, "--jobs must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    let config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let ctx = stages::Context { seed: cli.seed, config };
    let manifest = match cli.command {
        Command::Classify(a) => stages::classify(&ctx, &a)?,
        Command::Encode(a) => stages::encode(&ctx, &a)?,
        Command::Estimate(a) => stages::estimate(&ctx, &a)?,
        Command::Validate(a) => stages::validate(&ctx, &a)?,
        Command::Simulate(a) => stages::simulate(&ctx, &a)?,
        Command::Optimize(a) => stages::optimize(&ctx, &a)?,
        Command::Compare(a) => stages::compare(&ctx, &a)?,
        Command::Synth(a) => stages::synth(&ctx, &a)?,
        Command::ExportMilp(a) => stages::export_milp(&ctx, &a)?,
    };
    if cli.json {
        print!("{}", manifest.to_json());
    } else {
        println!("{}: {} artifact(s)", manifest.stage, manifest.outputs.len());
        if let serde_json::Value::Object(map) = &manifest.summary {
            for (k, v) in map {
                println!("  {k}: {v}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // help and version exit 0, usage errors 2
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ValidationFailure>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
