mod commands;
mod config;
mod dataset;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msct_core::MsctError;

use config::{RunConfig, SweepKind, TrainModel};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] MsctError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_config() => 2,
            CliError::Core(_) => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "msct", version, about = "Counterfactual post-crash speed forecasting")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the dataset and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a synthetic benchmark with counterfactual test paths.
    Generate {
        #[arg(long)]
        omega: Option<usize>,
    },
    /// Turn a detector CSV into a windowed dataset.
    Ingest {
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Fit a model on a dataset directory and write a checkpoint.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        model: Option<TrainModel>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score checkpoints and non-neural baselines on the test split.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Confounding-window or crash-ratio sweep.
    Sweep {
        #[arg(long, value_enum)]
        kind: Option<SweepKind>,
        /// Dataset for the crash-ratio sweep; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// MSCT and its four ablated variants.
    Ablate,
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let c = &cli.common;
    if c.seed.is_some() {
        cfg.seed = c.seed;
    }
    if let Some(j) = c.jobs {
        cfg.jobs = j;
    }
    if c.out.is_some() {
        cfg.out = c.out.clone();
    }
    match &cli.command {
        Command::Generate { omega } => {
            if let Some(w) = omega {
                cfg.dgp.omega = *w;
            }
        }
        Command::Ingest { csv } => {
            if csv.is_some() {
                cfg.paths.csv = csv.clone();
            }
        }
        Command::Train { data, model, resume } => {
            if data.is_some() {
                cfg.paths.data = data.clone();
            }
            if let Some(m) = model {
                cfg.train_model = *m;
            }
            if resume.is_some() {
                cfg.paths.resume = resume.clone();
            }
        }
        Command::Evaluate { data, checkpoints } => {
            if data.is_some() {
                cfg.paths.data = data.clone();
            }
            if !checkpoints.is_empty() {
                cfg.paths.checkpoints = checkpoints.clone();
            }
        }
        Command::Sweep { kind, data } => {
            if let Some(k) = kind {
                cfg.sweep.kind = *k;
            }
            if data.is_some() {
                cfg.paths.data = data.clone();
            }
        }
        Command::Ablate => {}
    }
    cfg.resolve_seed();
    if cfg.jobs == 0 {
        return Err(CliError::Config("jobs must be >= 1".into()));
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build_global()
        .map_err(|e| MsctError::Usage(format!("thread pool: {e}")))?;
    match cli.command {
        Command::Generate { .. } => commands::generate(cfg),
        Command::Ingest { .. } => commands::ingest(cfg),
        Command::Train { .. } => commands::train(cfg),
        Command::Evaluate { .. } => commands::evaluate(cfg),
        Command::Sweep { .. } => commands::sweep(cfg),
        Command::Ablate => commands::ablate(cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("msct: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
