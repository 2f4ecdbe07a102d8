//! `metanode` command-line tool: synthesise feature data, meta-train the
//! prototype flow, evaluate, and run the diagnostic analyses.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metanode::episodes::Mode;
use metanode::odeflow::Method;

use crate::config::{MethodName, Preset};

#[derive(Parser)]
#[command(name = "metanode", version, about = "Few-shot prototype rectification with a learned gradient flow")]
struct Cli {
    /// Worker threads; 1 forces sequential execution.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML run configuration overlaid on the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "default")]
    preset: Preset,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-cluster feature file.
    Synth(SynthArgs),
    /// Meta-train the inference network on a base-class feature file.
    Train(TrainArgs),
    /// Score a prototype method on novel-class episodes.
    Eval(EvalArgs),
    /// Prototype-bias, gradient-bias, convergence and trajectory reports.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    classes: Option<u64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Minimum angle between class centres, in degrees.
    #[arg(long)]
    min_angle: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Additional classes drawn from the same generator, written to --novel-out.
    #[arg(long, requires = "novel_out")]
    novel_classes: Option<usize>,
    #[arg(long, requires = "novel_classes")]
    novel_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Validation feature file scored after every epoch.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Training log; defaults to the checkpoint path plus `.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ProtocolArgs {
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    m_query: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    /// ODE solver: euler or rk4.
    #[arg(long)]
    solver: Option<Method>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    integral_time: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Required for --method metanode.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    method: Option<MethodName>,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Per-episode accuracy CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Report {
    ProtoBias,
    GradBias,
    Convergence,
    Trajectory,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    report: Report,
    /// Prototype method for proto-bias.
    #[arg(long, value_enum)]
    method: Option<MethodName>,
    /// Comma-separated integral times for the convergence report.
    #[arg(long, value_delimiter = ',')]
    times: Option<Vec<f64>>,
    /// Episode index for the trajectory report.
    #[arg(long)]
    episode: Option<usize>,
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        anyhow::ensure!(n >= 1, "--threads must be at least 1");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = config::RunConfig::load(cli.preset, cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => commands::synth(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
        Command::Analyze(a) => commands::analyze(cfg, a),
    }
}
