use std::path::PathBuf;
use std::process::ExitCode;

use benthos_cli::commands::{self, Regime};
use benthos_cli::{CliError, Context, ExperimentConfig};
use benthos_core::Split;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "benthos", version, about = "Detect, track and count benthic animals in survey video")]
struct Cli {
    /// TOML experiment config; built-in defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Training repeats per sweep setting; overrides the config.
    #[arg(long, global = true)]
    repeat: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset into --out.
    Gen,
    /// Train a detector on the train split.
    TrainDetector {
        /// Dataset directory; defaults to --out.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint path; defaults to <out>/detector.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train a substrate classifier.
    TrainSubstrate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "single")]
        regime: Regime,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Bottom-half mAP@0.5 on a split's evaluation frames.
    EvalDet {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate a detection dump instead of running a checkpoint.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Substrate AP on frames sampled once per second.
    EvalSubstrate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Detect at full frame rate, track and count.
    Pipeline {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Track a detection dump instead of running a checkpoint.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        gamma: Option<usize>,
    },
    /// Train and evaluate every combination of the config's sweep grid.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Summarize a sweep table.
    Report {
        /// Sweep CSV; defaults to <out>/sweep.csv.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = ExperimentConfig::load(cli.config.as_deref())?;
    let repeat = cli.repeat.unwrap_or(config.repeat);
    if repeat == 0 {
        return Err(CliError::Usage("--repeat must be at least 1".into()));
    }
    let ctx = Context { config, seed: cli.seed, out: cli.out, repeat };
    match cli.command {
        Command::Gen => commands::gen(&ctx).map(drop),
        Command::TrainDetector { data, checkpoint } => commands::train_detector(&ctx, &data, &checkpoint).map(drop),
        Command::TrainSubstrate { data, regime, checkpoint } => {
            commands::train_substrate(&ctx, &data, regime, &checkpoint).map(drop)
        }
        Command::EvalDet { data, checkpoint, detections, split } => {
            commands::eval_det(&ctx, &data, &checkpoint, &detections, split).map(drop)
        }
        Command::EvalSubstrate { data, checkpoint, split } => {
            commands::eval_substrate(&ctx, &data, &checkpoint, split).map(drop)
        }
        Command::Pipeline { data, checkpoint, detections, split, tau, gamma } => {
            commands::pipeline(&ctx, &data, &checkpoint, &detections, split, tau, gamma).map(drop)
        }
        Command::Sweep { data } => commands::sweep(&ctx, &data).map(drop),
        Command::Report { input } => commands::report(&ctx, &input).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
