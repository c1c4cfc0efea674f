use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

/// Evolutionary discovery of state-estimation programs.
#[derive(Debug, Parser)]
#[command(name = "evofilter", version)]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one trajectory and write it as CSV.
    Simulate(SimulateArgs),
    /// Run an evolutionary search and write a run directory.
    Discover(DiscoverArgs),
    /// Score a program on a generated split.
    Evaluate(EvaluateArgs),
    /// Convert between genotype JSON and program text.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
struct SystemArgs {
    #[arg(long, default_value_t = 1.0)]
    dt: f64,
    #[arg(long, default_value_t = 0.5)]
    sigma_a: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_z: f64,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// gaussian, half-gaussian, delayed or nonlinear.
    #[arg(long, default_value = "gaussian")]
    scenario: String,
    /// Delay range as `lo,hi` for the delayed scenario.
    #[arg(long)]
    delay: Option<String>,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    system: SystemArgs,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DiscoverArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    delay: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    islands: Option<usize>,
    #[arg(long)]
    max_evals: Option<u64>,
    /// `mock:<path>` or `http:<url>`.
    #[arg(long)]
    backend: Option<String>,
    /// Start every island from the reference program.
    #[arg(long)]
    seed_with_reference: bool,
    /// Candidates keep the reference input and output names.
    #[arg(long)]
    descriptive: bool,
    #[arg(long)]
    single_threaded: bool,
    /// Number of programs saved to the run directory.
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// Run directory; derived from method, task and seed when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Program file.
    program: PathBuf,
    #[arg(long, default_value = "full")]
    task: String,
    #[arg(long, default_value = "gaussian")]
    scenario: String,
    #[arg(long)]
    delay: Option<String>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trajectories in the evaluated split.
    #[arg(long, default_value_t = 50)]
    trajectories: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[command(flatten)]
    system: SystemArgs,
    /// Per-step MSE CSV.
    #[arg(long)]
    per_step: Option<PathBuf>,
    /// JSON report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    /// Program text decoded from a genotype.
    Dsl,
    /// Genotype JSON encoded from program text.
    Genotype,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NodeSetArg {
    Strict,
    Extended,
}

#[derive(Debug, Args)]
struct ExportArgs {
    input: PathBuf,
    #[arg(long, value_enum)]
    format: Format,
    /// Task whose signature a decoded genotype takes.
    #[arg(long, default_value = "full")]
    task: String,
    /// Decode with the reference input and output names.
    #[arg(long)]
    descriptive: bool,
    #[arg(long, value_enum, default_value = "extended")]
    node_set: NodeSetArg,
    /// Graph length when encoding; the smallest that fits when absent.
    #[arg(long)]
    max_nodes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes with stable exit codes.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Discover(a) => commands::discover(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Export(a) => commands::export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
