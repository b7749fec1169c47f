//! `fedsenone` command-line front end.

mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedsenone::config::RunConfig;

use failure::Failure;

/// Federated DP-SGD for senone frame classifiers.
///
/// Exit codes: 0 success, 2 usage or validation error, 3 transport setup
/// failure, 4 protocol abort, 5 privacy budget exhausted.
#[derive(Debug, Parser)]
#[command(name = "fedsenone", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic SENO0001 dataset.
    Synth(SynthArgs),
    /// Summarize a dataset, model or ledger file.
    Inspect(InspectArgs),
    /// Non-private mini-batch SGD on a public dataset.
    WarmStart(WarmStartArgs),
    /// Serve one federated session over TCP.
    Coordinator(CoordinatorArgs),
    /// Join a federated session over TCP.
    Worker(WorkerArgs),
    /// Run a whole federated session in one process.
    Simulate(SimulateArgs),
    /// Frame accuracy, optionally with a membership-gap probe.
    Eval(EvalArgs),
    /// Convert epochs to federated steps: epochs * ceil(sequences / batch).
    Steps(StepsArgs),
}

/// `model.*` keys.
#[derive(Debug, Args)]
struct ModelArgs {
    /// Feature dimension [model.input_dim]
    #[arg(long)]
    input_dim: Option<usize>,
    /// LSTM width [model.hidden]
    #[arg(long)]
    hidden: Option<usize>,
    /// Output classes [model.classes]
    #[arg(long)]
    classes: Option<usize>,
}

/// `dp.*` keys.
#[derive(Debug, Args)]
struct DpArgs {
    /// Per-step epsilon [dp.epsilon_step]
    #[arg(long)]
    epsilon_step: Option<f64>,
    /// Per-step delta [dp.delta_step]
    #[arg(long)]
    delta_step: Option<f64>,
    /// L2 clip bound per utterance gradient [dp.clip]
    #[arg(long)]
    clip: Option<f64>,
    /// Noise SD on the mean gradient, bypassing calibration [dp.noise_override]
    #[arg(long)]
    noise_override: Option<f64>,
    /// false for a public worker sending exact gradients [dp.noisy]
    #[arg(long, value_name = "BOOL")]
    noisy: Option<bool>,
    /// add-remove or replace [dp.adjacency]
    #[arg(long)]
    adjacency: Option<String>,
    /// Total epsilon budget [dp.budget_epsilon]
    #[arg(long)]
    budget_eps: Option<f64>,
    /// Total delta budget [dp.budget_delta]
    #[arg(long)]
    budget_delta: Option<f64>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// SynthSpec file (key = value); defaults apply when omitted
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
}

#[derive(Debug, Args)]
struct InspectArgs {
    path: PathBuf,
}

#[derive(Debug, Args)]
struct WarmStartArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Seeds initialization and shuffling [seed]
    #[arg(long)]
    seed: Option<u64>,
    /// Start from this model instead of a fresh initialization
    #[arg(long)]
    init_model: Option<PathBuf>,
    /// [train.epochs]
    #[arg(long)]
    epochs: Option<usize>,
    /// [train.lr]
    #[arg(long)]
    lr: Option<f64>,
    /// [train.batch]
    #[arg(long)]
    batch: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CoordinatorArgs {
    /// host:port to listen on; port 0 picks a free port [fed.addr]
    #[arg(long)]
    listen: Option<String>,
    /// [fed.workers]
    #[arg(long)]
    workers: Option<usize>,
    /// [fed.steps]
    #[arg(long)]
    steps: Option<u32>,
    /// Learning rate sent to every worker [train.lr]
    #[arg(long)]
    lr: Option<f64>,
    /// Shared starting weights; otherwise workers initialize from --seed
    #[arg(long)]
    init_model: Option<PathBuf>,
    /// Initialization seed when no --init-model is given [seed]
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelArgs,
    /// Per-message timeout
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
    #[arg(long)]
    transcript: PathBuf,
    #[arg(long)]
    summary: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct WorkerArgs {
    /// Coordinator host:port [fed.addr]
    #[arg(long)]
    connect: Option<String>,
    #[arg(long)]
    id: u32,
    #[arg(long)]
    data: PathBuf,
    /// Seeds batch sampling and noise [seed]
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    dp: DpArgs,
    /// [train.batch]
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ledger: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// One RunConfig per worker; worker ids are 1, 2, ... in this order
    #[arg(long, num_args = 1.., required = true)]
    workers_config: Vec<PathBuf>,
    /// One dataset per worker, same order as --workers-config
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    /// [fed.steps]
    #[arg(long)]
    steps: Option<u32>,
    /// Initialization seed; worker i without its own seed uses seed + i [seed]
    #[arg(long)]
    seed: Option<u64>,
    /// [train.lr]
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    init_model: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Test sets for the report; defaults to the worker datasets
    #[arg(long, num_args = 1..)]
    testset: Vec<PathBuf>,
    /// Experiment report (aligned text; a .tsv twin is written alongside)
    #[arg(long)]
    report: PathBuf,
    /// Directory for models, ledgers and the transcript
    #[arg(long)]
    out_dir: PathBuf,
    /// Session-wide RunConfig
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Baseline model for the membership-gap probe
    #[arg(long, requires = "probe_speaker")]
    baseline: Option<PathBuf>,
    /// Speaker whose frames form the probe set
    #[arg(long, requires = "baseline")]
    probe_speaker: Option<u32>,
}

#[derive(Debug, Args)]
struct StepsArgs {
    #[arg(long)]
    epochs: usize,
    /// Dataset whose sequence count is used
    #[arg(long, conflicts_with = "sequences", required_unless_present = "sequences")]
    data: Option<PathBuf>,
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long, default_value_t = 8)]
    batch: usize,
}

fn put<T: ToString>(cfg: &mut RunConfig, key: &str, value: &Option<T>) -> Result<(), Failure> {
    if let Some(v) = value {
        cfg.set(key, v.to_string())?;
    }
    Ok(())
}

impl ModelArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<(), Failure> {
        put(cfg, "model.input_dim", &self.input_dim)?;
        put(cfg, "model.hidden", &self.hidden)?;
        put(cfg, "model.classes", &self.classes)
    }
}

impl DpArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<(), Failure> {
        put(cfg, "dp.epsilon_step", &self.epsilon_step)?;
        put(cfg, "dp.delta_step", &self.delta_step)?;
        put(cfg, "dp.clip", &self.clip)?;
        put(cfg, "dp.noise_override", &self.noise_override)?;
        put(cfg, "dp.noisy", &self.noisy)?;
        put(cfg, "dp.adjacency", &self.adjacency)?;
        put(cfg, "dp.budget_epsilon", &self.budget_eps)?;
        put(cfg, "dp.budget_delta", &self.budget_delta)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::WarmStart(a) => commands::warm_start(a),
        Command::Coordinator(a) => commands::coordinator(a),
        Command::Worker(a) => commands::worker(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Eval(a) => commands::eval(a),
        Command::Steps(a) => commands::steps(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
