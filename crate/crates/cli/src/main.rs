//! Command-line entry point: dataset generation, training, calibration,
//! prediction, evaluation, and gradient verification as reproducible runs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use icnn_core::io::Split;
use icnn_core::{Error, Result};

#[derive(Parser)]
#[command(name = "icnn", about = "Interlinked multi-column network face parser")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap worker threads (0 = automatic). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the deterministic synthetic-face dataset.
    Synth {
        /// Override the configured image count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the stage-1 localizer or one stage-2 part network.
    Train {
        #[arg(long)]
        stage: u8,
        /// Required for stage 2: eyebrow | eye | nose | mouth.
        #[arg(long)]
        part: Option<String>,
    },
    /// Grid-search the background modulation of one part network.
    Calibrate {
        #[arg(long)]
        part: String,
    },
    /// Run the full two-stage parser on one image.
    Predict {
        #[arg(long)]
        image: PathBuf,
        /// Also write a color visualization PNG.
        #[arg(long)]
        viz: bool,
    },
    /// Predict a whole split and report F-measures.
    Eval {
        #[arg(long)]
        split: String,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        /// Tamper one analytic gradient; the suite must then fail.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err.kind() {
        "config" => 2,
        "shape" => 3,
        "data" => 4,
        "format" => 5,
        "numeric" => 6,
        "state" => 7,
        _ => 8,
    }
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if cfg.threads > 0 {
        icnn_core::set_worker_threads(cfg.threads)?;
    }

    match cli.command {
        Command::Synth { count } => {
            if let Some(count) = count {
                cfg.synth_count = count;
                if cfg.synth_val + cfg.synth_test > count {
                    cfg.synth_val = 0;
                    cfg.synth_test = 0;
                }
            }
            commands::cmd_synth(&cfg)?;
        }
        Command::Train { stage, part } => commands::cmd_train(&cfg, stage, part.as_deref())?,
        Command::Calibrate { part } => commands::cmd_calibrate(&cfg, &part)?,
        Command::Predict { image, viz } => commands::cmd_predict(&cfg, &image, viz)?,
        Command::Eval { split } => commands::cmd_eval(&cfg, Split::parse(&split)?)?,
        Command::Gradcheck { corrupt } => return commands::cmd_gradcheck(corrupt),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(exit_code_for(&e))
        }
    }
}
