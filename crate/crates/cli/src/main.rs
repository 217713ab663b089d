//! `fsrl`: command-line driver for the steering pipeline.
//!
//! Every subcommand reads its inputs from and writes its artifacts under the
//! output directory (`data/`, `checkpoints/`, `metrics/`, `reports/`), so the
//! stages can be run one at a time in pipeline order.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fsrl::harness::RunConfig;
use fsrl::Error;

#[derive(Parser, Debug)]
#[command(name = "fsrl", version, about = "Sparse feature steering with a preference objective")]
struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
pub enum Command {
    /// Generate the preference triplets and the pretraining corpus.
    GenData,
    /// Pretrain the toy language model on the corpus.
    TrainLm,
    /// Train the sparse autoencoder on the model's hook activations.
    TrainSae,
    /// Train the steering adapter against the frozen model.
    TrainAdapter,
    /// Fine-tune every model parameter on the same objective.
    TrainBaseline,
    /// Validation loss of the unsteered, steered and fine-tuned models.
    EvalLoss,
    /// Derive feature categories and ablate them from the steering vector.
    Ablate,
    /// Compare the adapter with static top-k truncations of its output.
    TopkBaseline,
    /// Feature usage frequencies and their exponential fit.
    AnalyzeUsage,
    /// Share of active features per category, with and without steering.
    Composition,
    /// Train one adapter per layer, penalty and activation variant.
    Sweep,
    /// Randomized checks of the local affine form and its rank bounds.
    VerifyTheory,
    /// Finite-difference checks of every trainable objective.
    GradCheck,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) | Error::Parse(_) | Error::Json(_) => 3,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 4,
        Error::Checkpoint(_) => 5,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> fsrl::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load_config(&cli).and_then(|cfg| commands::run(cli.command, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fsrl: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
