//! Command-line surface. Every value can also come from a `--config`
//! key=value file; flags win. Seeds fall back to the LIMN_SEED variable.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "limn", version, about = "Multi-faceted composed image retrieval on a synthetic attribute world")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset (items, triplets, vocab).
    GenData(GenDataArgs),
    /// Train the matching model and record per-epoch metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint with R@k over the full catalog gallery.
    Eval(EvalArgs),
    /// Score triplets with a checkpoint.
    Score(ScoreArgs),
    /// Excavate potential unlabeled reference-target pairs.
    MinePairs(MinePairsArgs),
    /// Caption mined pairs with a trained difference captioner.
    Caption(CaptionArgs),
    /// Run the iterative dual self-training loop end to end.
    SelfTrain(SelfTrainArgs),
    /// Print tables from the metrics files in an output directory.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct CommonArgs {
    /// Dataset directory (from gen-data).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for all files this run writes.
    #[arg(long)]
    pub out: PathBuf,
    /// Master seed (fallback: config file, then LIMN_SEED, then 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// key=value configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Output directory for the dataset.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Catalog size.
    #[arg(long)]
    pub items: Option<usize>,
    /// Number of training triplets.
    #[arg(long)]
    pub triplets: Option<usize>,
    /// Attribute slots (a prefix of color/pattern/sleeve/collar/length).
    #[arg(long)]
    pub slots: Option<usize>,
    /// Maximum edited slots per triplet.
    #[arg(long)]
    pub max_edits: Option<usize>,
    /// Render noise amplitude.
    #[arg(long)]
    pub noise: Option<f64>,
}

/// Model and optimizer settings shared by train and self-train.
#[derive(Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Matching tokens U.
    #[arg(long)]
    pub u: Option<usize>,
    /// Orthogonal-regularizer weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Softmax temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Shared feature dimension D.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Comma list of: one_factor, avepool, no_ortho, no_global, no_local.
    #[arg(long)]
    pub ablation: Option<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Recall ranks, e.g. 1,10,50.
    #[arg(long)]
    pub ks: Option<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint stem (without .json/.bin).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// train | val | test | all.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub ks: Option<String>,
}

#[derive(Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Triplets file to score (default: <data>/triplets.jsonl).
    #[arg(long)]
    pub triplets: Option<PathBuf>,
}

#[derive(Args)]
pub struct MinePairsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// tfidf_title | similarity_band | taxonomy_visual.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Pair budget M.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Checkpoint stem; required by the model-based strategies.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args)]
pub struct CaptionArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Captioner checkpoint stem.
    #[arg(long)]
    pub captioner: PathBuf,
    /// Pairs file (default: <out>/pairs.jsonl).
    #[arg(long)]
    pub pairs: Option<PathBuf>,
}

#[derive(Args)]
pub struct SelfTrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long)]
    pub ks: Option<String>,
    /// Mining strategy.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Mining pair budget (default: twice the training-set size).
    #[arg(long)]
    pub budget: Option<usize>,
    /// Retained pseudo triplets per iteration (default: training-set size).
    #[arg(long)]
    pub kappa: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Convergence threshold on average validation recall, in [0, 1]
    /// (0.001 = 0.1 points).
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Captioner training epochs.
    #[arg(long)]
    pub cap_epochs: Option<usize>,
    /// Captioner learning rate.
    #[arg(long)]
    pub cap_lr: Option<f64>,
    /// Captioner generation-time slot flip probability.
    #[arg(long)]
    pub flip_noise: Option<f64>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Directory holding metrics.json / selftrain_report.json.
    #[arg(long)]
    pub out: PathBuf,
}
