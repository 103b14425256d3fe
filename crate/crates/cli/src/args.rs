use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "neuronet", version, about = "Self-supervised sleep staging from single-channel EEG")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert EDF recordings into an epoch cache.
    Ingest(IngestArgs),
    /// Write a synthetic dataset as an epoch cache.
    Synth(SynthArgs),
    /// Self-supervised pretraining, one backbone per fold.
    Pretrain(PretrainArgs),
    /// Linear evaluation on frozen embeddings.
    Probe(EvalArgs),
    /// Fine-tuning with the temporal context module.
    Finetune(EvalArgs),
    /// Score another dataset with the soft-voted fold models of a run.
    Crosseval(CrossevalArgs),
    /// Ablation sweep over one knob.
    Sweep(SweepArgs),
    /// Rebuild report artifacts from saved predictions.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub edf_dir: PathBuf,
    #[arg(long, default_value = "EEG Fpz-Cz")]
    pub channel: String,
    /// Defaults to `$NEURONET_CACHE`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// `default`, `iid`, `markov`, or a TOML file.
    #[arg(long, default_value = "default")]
    pub spec: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write EDF+ files under `<out>/edf`.
    #[arg(long)]
    pub edf: bool,
}

#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run folds sequentially in one process.
    #[arg(long)]
    pub deterministic: bool,
    /// Folds run in parallel child processes.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Only this fold.
    #[arg(long)]
    pub fold: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Epoch cache; defaults to the config's `data.dir`, then `$NEURONET_CACHE`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Output directory of `pretrain`.
    #[arg(long = "run")]
    pub pretrained: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CrossevalArgs {
    /// Output directory of `probe` or `finetune`.
    #[arg(long)]
    pub train_run: PathBuf,
    /// Epoch cache of the target dataset.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub knob: String,
    /// Comma-separated; the knob's standard grid when absent.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directory of `probe`, `finetune` or `crosseval`.
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to the input directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
