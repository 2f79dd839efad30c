//! Command-line engine around the DiRecNetV2 model: training, evaluation,
//! prediction, FPS benchmarking, and speed/accuracy score tables.

pub mod bench;
pub mod cfg;
pub mod commands;
pub mod fsutil;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "direcnet", version, about = "Hybrid CNN-Transformer disaster classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on a manifest dataset and keep the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split and write metric reports.
    Evaluate(EvaluateArgs),
    /// Classify images and print per-class probabilities.
    Predict(PredictArgs),
    /// Measure inference throughput in frames per second.
    Bench(BenchArgs),
    /// Build the Score1/Score2 table from (name, weighted F1, FPS) rows.
    Score(ScoreArgs),
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    /// Manifest file (`path<TAB>label[;label...]` rows).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for checkpoints, the statistics cache and the training log.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Classifier head: `single` (softmax) or `multi` (sigmoid).
    #[arg(long, default_value = "single")]
    pub head_mode: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate (default 1e-4).
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Augmentation key-value file; omit for the built-in defaults.
    #[arg(long)]
    pub aug_config: Option<PathBuf>,
    /// Resume parameters and statistics from an existing checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// train,val,test fractions (default 0.8,0.1,0.1).
    #[arg(long)]
    pub fractions: Option<String>,
    /// Split assignment seed (defaults to --seed).
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Stop once this epoch train accuracy is reached.
    #[arg(long)]
    pub target_train_accuracy: Option<f64>,
    /// Optional global-norm gradient clip.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Key-value defaults file; explicit flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Which split to evaluate: train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// `single` or `multi`; defaults to the checkpoint's head mode.
    #[arg(long)]
    pub mode: Option<String>,
    /// Multi-label assignment threshold.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Comma-separated class subset for multi-label reports.
    #[arg(long)]
    pub classes: Option<String>,
    /// Report base path; writes `<base>.tsv` and `<base>.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub fractions: Option<String>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(clap::Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image file; repeatable.
    #[arg(long = "image", required = true)]
    pub images: Vec<PathBuf>,
    /// `single` or `multi`; defaults to the checkpoint's head mode.
    #[arg(long)]
    pub mode: Option<String>,
    /// Assignment threshold in multi mode.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(clap::Args, Debug)]
pub struct BenchArgs {
    /// Checkpoint to benchmark; omitted: a freshly initialized model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Seed for the fresh model and the fixed random input.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 20)]
    pub warmup: usize,
    #[arg(long, default_value_t = 200)]
    pub iterations: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Write the result table here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct ScoreArgs {
    /// Delimited rows: `name<TAB>weighted_f1<TAB>fps` (header and `#` lines
    /// ignored).
    #[arg(long)]
    pub rows: PathBuf,
    /// Comma-separated lambda weights (default 0.5,0.7,0.3).
    #[arg(long)]
    pub lambda: Option<String>,
    /// Normalization constant of the exponential score.
    #[arg(long, default_value_t = 1e27)]
    pub c: f64,
    /// Multiplier applied to weighted F1 inside the exponent.
    #[arg(long, default_value_t = 100.0)]
    pub f1_scale: f64,
    /// Sort rows by: wf1, fps, score2, or balance / lambda index `score1:N`.
    #[arg(long)]
    pub sort: Option<String>,
    /// Output base path; writes `<base>.tsv` and `<base>.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
