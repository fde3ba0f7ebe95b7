use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use flowmpc_harness::commands::{self, EvalOptions, TrainOptions};
use flowmpc_harness::config::Config;

#[derive(Parser)]
#[command(name = "flowmpc", version, about = "Learned sampling distributions for MPC: data, training and evaluation")]
struct Cli {
    /// Worker threads (1 gives the single-threaded mode).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of environments and start/goal pairs.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the environment model and the control-sequence posterior.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Run closed-loop suites and write result tables.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score environment sets with the environment prior.
    OodHist {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Turn a point cloud into a one-environment dataset.
    IngestPoints {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::OodHist { .. } => "ood-hist",
            Command::IngestPoints { .. } => "ingest-points",
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the worker pool")?;
    }
    match cli.command {
        Command::GenData { common } => {
            let config = Config::load(common.config.as_deref())?;
            let meta = commands::gen_data(&config, common.seed, &common.out)?;
            println!("{}", serde_json::json!({"environments": meta.count, "fingerprint": meta.fingerprint}));
        }
        Command::Train { common, dataset, resume, max_epochs } => {
            let config = Config::load(common.config.as_deref())?;
            let t = commands::train(&config, common.seed, &common.out, &TrainOptions { dataset, resume, max_epochs })?;
            println!("{}", serde_json::json!({"epochs": t.state.epoch, "finished": t.finished()}));
        }
        Command::Eval { common, dataset, checkpoint } => {
            let config = Config::load(common.config.as_deref())?;
            let out = commands::eval(&config, common.seed, &common.out, &EvalOptions { dataset, checkpoint })?;
            print!("{}", flowmpc_harness::report::results_table(&out.rows));
        }
        Command::OodHist { common, checkpoint } => {
            let config = Config::load(common.config.as_deref())?;
            let out = commands::ood_hist(&config, common.seed, &common.out, checkpoint.as_deref())?;
            println!("{}", serde_json::json!({"auroc": out.auroc}));
        }
        Command::IngestPoints { common, input } => {
            let config = Config::load(common.config.as_deref())?;
            let report = commands::ingest(&config, common.seed, &common.out, input.as_deref())?;
            println!("{report}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", serde_json::json!({"command": name, "error": format!("{e:#}"), "causes": chain}));
            ExitCode::FAILURE
        }
    }
}
