use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "seal", version, about = "Align sensor features with label embeddings for context-aware activity recognition")]
pub struct Cli {
    /// Print progress to stderr.
    #[arg(long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Recording CSV to feature CSV (3 s windows, 1.5 s step).
    Preprocess(PreprocessArgs),
    /// Synthetic dataset with schema and label embeddings.
    Synth(SynthArgs),
    /// Train the alignment model.
    Train(TrainArgs),
    /// Score a checkpoint on a feature CSV.
    Evaluate(EvaluateArgs),
    /// Write predictions for a feature CSV.
    Predict(PredictArgs),
    /// Bayesian search over training hyperparameters.
    Hyperopt(HyperoptArgs),
    /// Write projected label embeddings of a trained model.
    ExportEmbeddings(ExportArgs),
    /// Train the alignment model and the binary-head baseline on one split.
    Compare(TrainArgs),
    /// Re-run a command from its `run_config.json`.
    #[serde(skip)]
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Preprocess(_) => "preprocess",
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Predict(_) => "predict",
            Command::Hyperopt(_) => "hyperopt",
            Command::ExportEmbeddings(_) => "export-embeddings",
            Command::Compare(_) => "compare",
            Command::Replay(_) => "replay",
        }
    }

    pub fn out_mut(&mut self) -> &mut PathBuf {
        match self {
            Command::Preprocess(a) => &mut a.out,
            Command::Synth(a) => &mut a.out,
            Command::Train(a) | Command::Compare(a) => &mut a.out,
            Command::Evaluate(a) => &mut a.out,
            Command::Predict(a) => &mut a.out,
            Command::Hyperopt(a) => &mut a.train.out,
            Command::ExportEmbeddings(a) => &mut a.out,
            Command::Replay(a) => &mut a.config,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub schema: PathBuf,
    /// Recording CSV: `t`, channel columns, optional `y_<label>` columns.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "user0")]
    pub user: String,
    /// Overrides the rate estimated from the `t` column.
    #[arg(long)]
    pub sample_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Synth spec JSON; defaults to 3 contexts, 6 activities, d=32, n=2000, σ=0.05.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the synth spec file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyArg {
    Fixed,
    Tuned,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub schema: PathBuf,
    /// Feature CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Label embedding JSONL; the trigram fallback embedder is used when absent.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TrainConfig JSON used as the base before flag overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub threshold_policy: Option<PolicyArg>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<u32>,
    /// Reject hyperparameters outside the search space.
    #[arg(long)]
    pub strict_space: bool,
    /// Search space JSON; defaults to the standard training ranges.
    #[arg(long)]
    pub space: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub embedding_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartArg {
    All,
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Must equal the checkpoint schema when given.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Split part to score, recomputed from the checkpoint's split seed.
    #[arg(long, value_enum, default_value = "all")]
    pub part: PartArg,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct HyperoptArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainArgs,
    #[arg(long, default_value_t = seal_core::hyperopt::DEFAULT_BUDGET)]
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// A `run_config.json` written by an earlier run.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
