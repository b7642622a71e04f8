use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cdcm", version, about = "Context-dependent convolutional matching of phrase pairs")]
pub struct Cli {
    /// `key = value` file supplying defaults for any flag
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn bilingual word embeddings from an aligned corpus
    Pretrain(PretrainArgs),
    /// Train the matcher with the easy/medium/difficult curriculum
    Train(TrainArgs),
    /// Score `sentence ||| i j ||| target phrase` queries
    Score(ScoreArgs),
    /// Check analytic gradients of a small random model against finite differences
    Gradcheck(GradCheckArgs),
    /// Dump sampled training triples
    Negatives(NegativesArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output directory for `source.emb` and `target.emb`
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Width of the per-side window projection
    #[arg(long)]
    pub window_dim: Option<usize>,
    #[arg(long)]
    pub combine_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Negative windows per aligned word pair
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub embed_init_scale: Option<f64>,
    #[arg(long)]
    pub init_gain: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// `src ||| tgt ||| count` lines; extracted from the corpus when absent
    #[arg(long)]
    pub phrase_table: Option<PathBuf>,
    #[arg(long)]
    pub source_embeddings: Option<PathBuf>,
    #[arg(long)]
    pub target_embeddings: Option<PathBuf>,
    /// Output directory for the model, stage snapshots and loss trace
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub embed_lr_factor: Option<f64>,
    /// Curriculum steps n
    #[arg(long)]
    pub steps: Option<usize>,
    /// Presentations per unit budget t (default: size of the easy pool)
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub convergence_tol: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub feature_maps: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub source_len: Option<usize>,
    #[arg(long)]
    pub target_len: Option<usize>,
    #[arg(long)]
    pub max_phrase_len: Option<usize>,
    #[arg(long)]
    pub source_layers: Option<usize>,
    #[arg(long)]
    pub target_layers: Option<usize>,
    #[arg(long)]
    pub combine_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub init_gain: Option<f64>,
    /// Scale of random embeddings when no embedding files are given
    #[arg(long)]
    pub embed_init_scale: Option<f64>,
    #[arg(long)]
    pub negatives_per_example: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Output file (default: standard output)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Finite-difference step
    #[arg(long)]
    pub h: Option<f64>,
    /// Largest acceptable relative error
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub kink_margin: Option<f64>,
    /// Fresh triples to try before giving up on kinks
    #[arg(long)]
    pub retries: Option<usize>,
}

#[derive(Debug, Args)]
pub struct NegativesArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub phrase_table: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_phrase_len: Option<usize>,
    #[arg(long)]
    pub negatives_per_example: Option<usize>,
}
