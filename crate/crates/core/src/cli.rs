//! Command-line front end: `cdinfer estimate|simulate|oracle|enumerate`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::baseline_lz::LzVariant;
use crate::io::{
    read_design_file, read_population_file, read_sample_file, to_json, write_json_file, write_population_file,
    write_sample_file, IoError,
};
use crate::montecarlo::{
    replication_inputs, run_study, run_study_with_threads, DgpSpec, ProtocolError, Regime, SimProtocol,
};
use crate::report::{self, EstimateOptions, ReportError};

#[derive(Debug, Parser)]
#[command(
    name = "cdinfer",
    version,
    about = "Design-based inference for cluster-randomized experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Point estimate, variance bounds and intervals from observed data.
    Estimate(EstimateArgs),
    /// Monte Carlo study over simulated populations.
    Simulate(SimulateArgs),
    /// Exact design variances of a full potential-outcome table.
    Oracle(PopulationArgs),
    /// Exact design moments by enumerating every realization.
    Enumerate(PopulationArgs),
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Observed data, columns cluster_id,unit_id,d,y.
    #[arg(long)]
    pub sample: PathBuf,
    /// Design JSON.
    #[arg(long)]
    pub design: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1.96)]
    pub critical: f64,
    #[arg(long, default_value_t = LzVariant::Cr1)]
    pub lz_variant: LzVariant,
    /// Assumed β in 1/p = O(C^β), used by the heterogeneity diagnostic.
    #[arg(long, default_value_t = 0.0)]
    pub beta_hint: f64,
}

#[derive(Debug, Args)]
pub struct PopulationArgs {
    /// Potential outcomes, columns cluster_id,unit_id,y0,y1.
    #[arg(long)]
    pub population: PathBuf,
    #[arg(long)]
    pub design: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    pub dgp: u8,
    #[arg(long, default_value_t = Regime::R1)]
    pub regime: Regime,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[arg(long, default_value_t = 20240601)]
    pub seed: u64,
    #[arg(long, default_value_t = 120)]
    pub clusters: usize,
    #[arg(long, default_value_t = 80)]
    pub sampled: usize,
    #[arg(long, default_value_t = 40)]
    pub treated: usize,
    #[arg(long, default_value_t = 185)]
    pub size_min: usize,
    #[arg(long, default_value_t = 195)]
    pub size_max: usize,
    #[arg(long, default_value_t = 1.96)]
    pub critical: f64,
    #[arg(long, default_value_t = LzVariant::Cr1)]
    pub lz_variant: LzVariant,
    /// Read the DGP scale parameters as variances instead of standard deviations.
    #[arg(long)]
    pub variance_reading: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-replication records as CSV.
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Write population, design, sample and estimate of replication K.
    #[arg(long, requires = "export_dir")]
    pub export_rep: Option<usize>,
    #[arg(long, requires = "export_rep")]
    pub export_dir: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// 2 input or usage, 3 design violation, 4 estimator precondition,
    /// 5 enumeration too large.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(IoError::Design(_)) => 3,
            CliError::Io(_) | CliError::Protocol(_) | CliError::Usage(_) => 2,
            CliError::Report(ReportError::Design(_)) => 3,
            CliError::Report(ReportError::Estimator(_)) => 4,
            CliError::Report(ReportError::TooLarge { .. }) => 5,
        }
    }
}

fn emit(json: String, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, json).map_err(|source| {
            CliError::Io(IoError::File {
                path: path.display().to_string(),
                source,
            })
        }),
        None => std::io::stdout()
            .write_all(json.as_bytes())
            .map_err(|e| CliError::Usage(e.to_string())),
    }
}

fn estimate(args: &EstimateArgs) -> Result<(), CliError> {
    if !(args.critical.is_finite() && args.critical > 0.0) {
        return Err(CliError::Usage(format!(
            "critical value must be positive, got {}",
            args.critical
        )));
    }
    let design = read_design_file(&args.design)?;
    let sample = read_sample_file(&args.sample, &design)?;
    let opts = EstimateOptions {
        critical: args.critical,
        lz_variant: args.lz_variant,
        beta_hint: args.beta_hint,
    };
    let report = report::estimate(&sample, &design, opts)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    emit(to_json(&report), args.out.as_deref())
}

fn oracle(args: &PopulationArgs) -> Result<(), CliError> {
    let design = read_design_file(&args.design)?;
    let pop = read_population_file(&args.population)?;
    emit(to_json(&report::oracle(&pop, &design)?), args.out.as_deref())
}

fn enumerate(args: &PopulationArgs) -> Result<(), CliError> {
    let design = read_design_file(&args.design)?;
    let pop = read_population_file(&args.population)?;
    emit(to_json(&report::enumerate(&pop, &design)?), args.out.as_deref())
}

fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var("THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!(
                "THREADS must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(None),
    }
}

fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let dgp = if args.variance_reading {
        DgpSpec::builtin_variance_reading(args.dgp)?
    } else {
        DgpSpec::builtin(args.dgp)?
    };
    let protocol = SimProtocol {
        clusters: args.clusters,
        sampled: args.sampled,
        treated: args.treated,
        regime: args.regime,
        replications: args.reps,
        seed: args.seed,
        size_min: args.size_min,
        size_max: args.size_max,
        critical: args.critical,
        lz_variant: args.lz_variant,
    };
    protocol.validate()?;
    if let (Some(rep), Some(dir)) = (args.export_rep, &args.export_dir) {
        export_replication(&dgp, &protocol, rep, dir)?;
    }
    let output = match threads_from_env()? {
        Some(n) => run_study_with_threads(&dgp, &protocol, n)?,
        None => run_study(&dgp, &protocol)?,
    };
    if let Some(path) = &args.records {
        let file_err = |e: csv::Error| CliError::Usage(format!("{}: {e}", path.display()));
        let mut wtr = csv::Writer::from_path(path).map_err(file_err)?;
        for r in &output.records {
            wtr.serialize(r).map_err(file_err)?;
        }
        wtr.flush().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    for m in output.result.failure_messages.iter().take(5) {
        eprintln!("warning: replication failed: {m}");
    }
    emit(to_json(&output.result), args.out.as_deref())
}

fn export_replication(dgp: &DgpSpec, protocol: &SimProtocol, rep: usize, dir: &Path) -> Result<(), CliError> {
    if rep >= protocol.replications {
        return Err(CliError::Usage(format!(
            "export replication {rep} out of range for {} replications",
            protocol.replications
        )));
    }
    fs::create_dir_all(dir).map_err(|source| {
        CliError::Io(IoError::File {
            path: dir.display().to_string(),
            source,
        })
    })?;
    let (pop, design, sample) = replication_inputs(dgp, protocol, rep);
    write_population_file(&pop, &dir.join("population.csv"))?;
    write_json_file(&design, &dir.join("design.json"))?;
    write_sample_file(&sample, &dir.join("sample.csv"))?;
    let opts = EstimateOptions {
        critical: protocol.critical,
        lz_variant: protocol.lz_variant,
        beta_hint: 0.0,
    };
    let report = report::estimate(&sample, &design, opts)?;
    write_json_file(&report, &dir.join("estimate.json"))?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Estimate(a) => estimate(a),
        Command::Simulate(a) => simulate(a),
        Command::Oracle(a) => oracle(a),
        Command::Enumerate(a) => enumerate(a),
    }
}
