use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "maskwright", version, about = "Train explanation masks for frozen networks on synthetic tasks")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic task and write train/ and test/ datasets.
    GenTask(GenTaskArgs),
    /// Train a base model on a dataset.
    TrainBase(TrainBaseArgs),
    /// Train an explanation network against a frozen base model.
    TrainExplainer(TrainExplainerArgs),
    /// Export masks as PGM heatmaps or token-weight tables.
    Explain(ExplainArgs),
    /// Score base and masked models and write metrics JSON.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite over every layer and loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenTaskArgs {
    /// planted_patch, keyword_seq or char_count
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// JSON run configuration; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// adam or sgd
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the training log to this file
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainBaseArgs {
    /// Dataset directory written by gen-task
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct TrainExplainerArgs {
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Mask regularizers, e.g. l1=1e-3,l2=1e-4,entropy=0.1
    #[arg(long)]
    pub reg: Option<String>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub explainer: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Export at most this many examples
    #[arg(long, default_value_t = 16)]
    pub limit: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub explainer: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}
