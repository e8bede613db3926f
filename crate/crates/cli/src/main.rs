use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctxseg_cli::commands::{cmd_eval, cmd_predict, cmd_synth, cmd_train, configure_workers};
use ctxseg_cli::config::{experiment_root, ExperimentConfig, ROOT_ENV};

#[derive(Parser)]
#[command(name = "ctxseg", version, about = "Wide-context semantic segmentation")]
struct Cli {
    /// Directory that relative data and run paths resolve against.
    #[arg(long, global = true, env = ROOT_ENV)]
    root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic context-dependency dataset.
    Synth(Common),
    /// Train a model and keep the best-OA checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the run's last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs; continue later with `--resume`.
        #[arg(long, value_name = "N")]
        stop_after_epochs: Option<usize>,
    },
    /// Score a checkpoint on a dataset split and print the report as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Predict a class map for one image.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input `.npy` image, `[bands, H, W]`.
        #[arg(long)]
        image: PathBuf,
        /// Output `.npy` class map.
        #[arg(long, short)]
        output: PathBuf,
    },
}

fn load(c: &Common) -> ctxseg::Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(c.config.as_deref(), &c.overrides)?;
    configure_workers(cfg.workers);
    Ok(cfg)
}

fn run(cli: Cli) -> ctxseg::Result<()> {
    let root = cli.root.unwrap_or_else(experiment_root);
    match cli.command {
        Command::Synth(c) => {
            let dir = cmd_synth(&load(&c)?, &root)?;
            println!("{}", dir.display());
        }
        Command::Train { common, resume, stop_after_epochs } => {
            let (dir, report) = cmd_train(&load(&common)?, &root, resume, stop_after_epochs)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            eprintln!("run directory: {}", dir.display());
        }
        Command::Eval { common, checkpoint, split } => {
            let report = cmd_eval(&load(&common)?, &root, &checkpoint, &split)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Predict { common, checkpoint, image, output } => {
            let pred = cmd_predict(&load(&common)?, &checkpoint, &image, &output)?;
            eprintln!("wrote {}x{} class map to {}", pred.nrows(), pred.ncols(), output.display());
        }
    }
    Ok(())
}

fn exit_code(category: &str) -> u8 {
    match category {
        "config" => 2,
        "data" => 3,
        "geometry" => 4,
        "contract" => 5,
        "checkpoint" => 6,
        "divergence" => 7,
        "io" => 8,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(exit_code(e.category()))
        }
    }
}
