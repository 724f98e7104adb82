//! `mapbot`: config validation, Syncboard schedules, GPRMC codec, simulated
//! collection runs, post-processing, interference analysis and the cluster
//! gateway.
//!
//! Exit status: 0 ok, 1 runtime failure, 2 usage or config error.

mod analysis_cmd;
mod cluster_cmd;
mod io;
mod nmea_cmd;
mod postproc_cmd;
mod trigger_cmd;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mapbot_core::config::Diagnostic;
use mapbot_core::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "mapbot", version, about = "Multi-sensor mapping robot simulator and analysis toolkit")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a run config and print located diagnostics.
    Validate {
        config: PathBuf,
    },
    /// Run the full collection procedure and write the artifact tree.
    Run(RunArgs),
    /// Syncboard trigger schedules.
    #[command(subcommand)]
    Trigger(trigger_cmd::TriggerCmd),
    /// GPRMC sentence codec.
    #[command(subcommand)]
    Nmea(nmea_cmd::NmeaCmd),
    /// Post-processing of recorded streams.
    #[command(subcommand)]
    Postproc(postproc_cmd::PostprocCmd),
    /// Interference statistics.
    #[command(subcommand)]
    Analysis(analysis_cmd::AnalysisCmd),
    /// Start the master with its HTTP/WebSocket gateway.
    Serve(cluster_cmd::ServeArgs),
    /// Cluster operations, local or against a running gateway.
    #[command(subcommand)]
    Cluster(cluster_cmd::ClusterCmd),
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Recording length in seconds; defaults to the config's duration_s.
    #[arg(long)]
    duration: Option<f64>,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

/// Failure classes mapped onto exit statuses.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, unreadable or invalid config: exit 2.
    Usage(String),
    /// Anything that went wrong while doing the work: exit 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn print_diagnostics(diags: &[Diagnostic]) {
    for d in diags {
        eprintln!("{d}");
    }
}

/// Load and validate a config; any error diagnostic is a usage failure.
pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    let (cfg, diags) = RunConfig::load(path);
    print_diagnostics(&diags);
    cfg.ok_or_else(|| usage(format!("{}: invalid config", path.display())))
}

fn validate(path: &Path) -> CliResult {
    let (cfg, diags) = RunConfig::load(path);
    for d in &diags {
        println!("{d}");
    }
    let errors = diags.iter().filter(|d| d.is_error()).count();
    println!(
        "{}: {} error(s), {} warning(s)",
        path.display(),
        errors,
        diags.len() - errors
    );
    match cfg {
        Some(_) => Ok(()),
        None => Err(usage(format!("{}: invalid config", path.display()))),
    }
}

pub fn run(args: &RunArgs) -> CliResult {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let duration = args.duration.unwrap_or(cfg.duration_s);
    if !(duration >= 0.0 && duration.is_finite()) {
        return Err(usage(format!("duration {duration} must be >= 0")));
    }
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let outcome = mapbot_core::cluster::run::run_collection(&cfg, &out, duration)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;
    let s = &outcome.summary;
    println!("run {} -> {}", s.run_label, out.display());
    for (sensor, n) in s.sensor_counts() {
        println!("  {sensor:<16} {n:>8} records");
    }
    let drops: usize = outcome.restorations.iter().map(|r| r.dropped_trigger_indices.len()).sum();
    println!(
        "  restoration: {} sensors, {drops} dropped triggers; {} corrupt chunks",
        outcome.restorations.len(),
        outcome.corrupt_chunks
    );
    for (node, reason) in s.degraded_nodes() {
        println!("  node {node} degraded: {reason}");
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Validate { config } => validate(&config),
        Command::Run(a) => run(&a),
        Command::Trigger(c) => trigger_cmd::exec(c),
        Command::Nmea(c) => nmea_cmd::exec(c),
        Command::Postproc(c) => postproc_cmd::exec(c),
        Command::Analysis(c) => analysis_cmd::exec(c),
        Command::Serve(a) => cluster_cmd::serve(a),
        Command::Cluster(c) => cluster_cmd::exec(c),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
