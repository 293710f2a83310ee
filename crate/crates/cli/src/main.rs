use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clarity_cli::{cmd_ablate, cmd_evaluate, cmd_predict, cmd_report, cmd_train, exit, Axis, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "clarity", version, about = "Response-clarity classification: train, predict, evaluate, ablate, report")]
struct Cli {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stratified k-fold training; writes checkpoints, logs and out-of-fold predictions.
    Train {
        /// Training split; overrides data.train.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Ensemble prediction over fold checkpoints.
    Predict {
        /// Checkpoint file; repeat for several. Defaults to <out>/checkpoints/fold_*.json.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Input split; overrides data.test.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Scores a prediction file against gold labels or annotations.
    Evaluate {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Reruns cross-validation varying one component.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Dataset statistics and error analysis of out-of-fold predictions.
    Report {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<String, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Train { data } => {
            if data.is_some() {
                cfg.data.train = data;
            }
            cmd_train(&cfg).map(|(_, text)| text)
        }
        Command::Predict { checkpoints, input } => cmd_predict(&cfg, &checkpoints, input.as_deref()).map(|(_, t)| t),
        Command::Evaluate { gold, predictions } => cmd_evaluate(&cfg.out_dir, &gold, &predictions).map(|(_, t)| t),
        Command::Ablate { axis, data } => {
            if data.is_some() {
                cfg.data.train = data;
            }
            cmd_ablate(&cfg, axis).map(|(_, t)| t)
        }
        Command::Report { data, predictions } => cmd_report(&cfg, &data, predictions.as_deref()).map(|(_, t)| t),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::CONFIG as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
