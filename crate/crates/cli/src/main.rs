use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gcq::config::RunConfig;
use gcq::GcqError;

mod commands;

#[derive(Parser)]
#[command(
    name = "gcq",
    version,
    about = "Grid-cell codebook world model: data, training, prediction and planning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint path, overriding `[paths] checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random-walk dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output file, overriding `[paths] dataset`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        records: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
    },
    /// Train the world model and write a checkpoint plus per-epoch metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint instead of starting fresh.
        #[arg(long)]
        resume: bool,
        /// Dataset for prediction metrics (defaults to the training set).
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Roll a trained model forward from the start of a recorded trajectory.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Initialization length.
        #[arg(long, default_value_t = 3)]
        init: usize,
        #[arg(long, default_value_t = 10)]
        horizon: usize,
        /// Dataset file, overriding `[paths] dataset`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        record: usize,
        /// Comma-separated action symbols replacing the recorded future.
        #[arg(long)]
        actions: Option<String>,
    },
    /// Plan greedily from a start cell to a goal cell in the environment.
    Plan {
        #[command(flatten)]
        common: Common,
        /// Start cell as `row,col`.
        #[arg(long)]
        start: String,
        /// Goal cell as `row,col`.
        #[arg(long)]
        goal: String,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Recover the actions between consecutive frames of a trajectory.
    Invert {
        #[command(flatten)]
        common: Common,
        /// Dataset file holding the trajectory.
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long, default_value_t = 0)]
        record: usize,
        /// Replay the recovered actions from this `row,col` cell.
        #[arg(long)]
        transport_from: Option<String>,
    },
    /// Write codeword images, a grid-pattern composite and the fixed-point residual table.
    Inspect {
        #[command(flatten)]
        common: Common,
        /// Codewords imaged per factor.
        #[arg(long, default_value_t = 4)]
        samples: usize,
    },
}

pub enum Failure {
    Config(String),
    Runtime(String),
}

impl From<GcqError> for Failure {
    fn from(e: GcqError) -> Self {
        match e {
            GcqError::Config { .. } => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// Reads the config and applies `GCQ_SEED`.
fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| Failure::Config(format!("config error: cannot read {}: {e}", common.config.display())))?;
    let mut config = RunConfig::parse(&text)?;
    if let Ok(seed) = std::env::var("GCQ_SEED") {
        let seed = seed
            .trim()
            .parse()
            .map_err(|_| Failure::Config(format!("config error: GCQ_SEED `{seed}` is not an unsigned integer")))?;
        config.override_seed(seed);
    }
    if let Some(c) = &common.checkpoint {
        config.paths.checkpoint = c.clone();
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData {
            common,
            out,
            records,
            length,
        } => {
            let mut config = load_config(&common)?;
            if let Some(r) = records {
                config.data.records = r;
            }
            if let Some(l) = length {
                config.data.length = l;
            }
            let out = out.unwrap_or_else(|| config.paths.dataset.clone());
            commands::gen_data(&config, &out)
        }
        Command::Train { common, resume, eval } => commands::train(&load_config(&common)?, resume, eval.as_deref()),
        Command::Predict {
            common,
            init,
            horizon,
            data,
            record,
            actions,
        } => {
            let config = load_config(&common)?;
            let data = data.unwrap_or_else(|| config.paths.dataset.clone());
            commands::predict(&config, &data, record, init, horizon, actions.as_deref())
        }
        Command::Plan {
            common,
            start,
            goal,
            max_steps,
        } => {
            let config = load_config(&common)?;
            commands::plan(
                &config,
                commands::parse_cell(&start)?,
                commands::parse_cell(&goal)?,
                max_steps,
            )
        }
        Command::Invert {
            common,
            trajectory,
            record,
            transport_from,
        } => {
            let config = load_config(&common)?;
            let from = transport_from.as_deref().map(commands::parse_cell).transpose()?;
            commands::invert(&config, &trajectory, record, from)
        }
        Command::Inspect { common, samples } => commands::inspect(&load_config(&common)?, samples),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
