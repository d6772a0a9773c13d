//! `nasprune`: create, sort, grid, train and evaluate an elastic GQA
//! super-network from one config file and a checkpoint directory.

mod commands;
mod config;
mod error;
mod plot;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "nasprune", version, about = "Elastic GQA super-network compression pipeline")]
struct Cli {
    /// TOML config file; built-in toy defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint directory read and written by the subcommand.
    #[arg(long, global = true, default_value = "run")]
    ckpt: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create a super-network, optionally pretrained on the corpus.
    Init(InitArgs),
    /// Score components on calibration data and sort them by importance.
    Sort(SortArgs),
    /// Build the parameter-binned candidate grid.
    Grid(GridArgs),
    /// Fine-tune the super-network, or one sub-network on its own.
    Train(TrainArgs),
    /// Validation perplexity, size, FLOPs and latency of sub-networks.
    Eval(EvalArgs),
    /// Non-dominated rows of an eval table, as CSV and SVG.
    Pareto(ParetoArgs),
    /// Write one sub-network as a standalone checkpoint.
    Extract(ExtractArgs),
    /// Time batch-1 prefill of a materialized sub-network.
    Latency(LatencyArgs),
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    #[arg(long)]
    pub pretrain_lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SortArgs {
    /// `batch-seq` aggregation, e.g. mean-mean, norm-mean, variance-norm.
    #[arg(long)]
    pub scheme: Option<String>,
    /// cosine or drop.
    #[arg(long)]
    pub block_scheme: Option<String>,
    #[arg(long)]
    pub calib_samples: Option<usize>,
    #[arg(long)]
    pub rpd_thetas: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub per_bin: Option<usize>,
    #[arg(long)]
    pub max_trials: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub final_lr: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    /// cosine, forward_kl, reverse_kl, js, l1 or l2.
    #[arg(long)]
    pub kd: Option<String>,
    #[arg(long)]
    pub kd_temp: Option<f64>,
    #[arg(long)]
    pub kd_weight: Option<f64>,
    #[arg(long, overrides_with = "no_lora")]
    pub lora: bool,
    #[arg(long, overrides_with = "lora")]
    pub no_lora: bool,
    /// weight_sharing or independent.
    #[arg(long)]
    pub mode: Option<String>,
    /// random or pretrained; independent mode only.
    #[arg(long)]
    pub init: Option<String>,
    /// Sub-network of independent mode, `d_model,n_heads,d_head,ffn_ratio,n_layers`.
    #[arg(long)]
    pub theta: Option<String>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// grid or uniform.
    #[arg(long)]
    pub sampler: Option<String>,
    /// Output directory of independent mode.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, conflicts_with = "all_grid", required_unless_present = "all_grid")]
    pub theta: Option<String>,
    #[arg(long)]
    pub all_grid: bool,
    /// Table path; defaults to `<ckpt>/eval.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub windows: Option<usize>,
    /// 0 skips latency measurement.
    #[arg(long)]
    pub latency_reps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ParetoArgs {
    /// params or latency.
    #[arg(long, default_value = "params")]
    pub cost: String,
    /// Eval tables to merge; defaults to `<ckpt>/eval.csv`. Repeatable.
    #[arg(long)]
    pub input: Vec<PathBuf>,
    /// Output prefix; defaults to `<ckpt>/pareto_<cost>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub theta: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LatencyArgs {
    /// Defaults to the full network.
    #[arg(long)]
    pub theta: Option<String>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Prefill length; defaults to the training sequence length.
    #[arg(long)]
    pub seq: Option<usize>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = config::RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let ctx = commands::Context {
        cfg,
        config_path: cli.config,
        ckpt: cli.ckpt,
    };
    match cli.command {
        Command::Init(a) => commands::init(ctx, a),
        Command::Sort(a) => commands::sort(ctx, a),
        Command::Grid(a) => commands::grid(ctx, a),
        Command::Train(a) => commands::train(ctx, a),
        Command::Eval(a) => commands::eval(ctx, a),
        Command::Pareto(a) => commands::pareto(ctx, a),
        Command::Extract(a) => commands::extract(ctx, a),
        Command::Latency(a) => commands::latency(ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {line}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
