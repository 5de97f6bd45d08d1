use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::retrieval::{GroupPolicy, DEFAULT_NEIGHBORS};
use crate::sae::Selection;
use crate::steering::{SteerMode, DEFAULT_GAMMA, DEFAULT_LAMBDA};
use crate::train::LossMode;

fn parse_mode(s: &str) -> Result<LossMode, String> {
    s.parse().map_err(|e: crate::Error| e.to_string())
}

fn parse_steer_mode(s: &str) -> Result<SteerMode, String> {
    s.parse().map_err(|e: crate::Error| e.to_string())
}

fn parse_policy(s: &str) -> Result<GroupPolicy, String> {
    s.parse().map_err(|e: crate::Error| e.to_string())
}

fn parse_selection(s: &str) -> Result<Selection, String> {
    match s {
        "magnitude" => Ok(Selection::Magnitude),
        "signed" => Ok(Selection::Signed),
        other => Err(format!("unknown selection rule {other:?}")),
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "sparse-steer",
    version,
    about = "Train sparse autoencoders on cached embeddings and steer them for zero-shot classification"
)]
pub struct Cli {
    /// TOML file of `key = value` defaults; keys are long flag names of the
    /// chosen subcommand, and flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker thread cap.
    #[arg(long, global = true, env = "VS2_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a numeric CSV into an embedding bundle.
    Ingest(IngestArgs),
    /// Train a sparse autoencoder on an embedding bundle.
    TrainSae(TrainArgs),
    /// Write a steered copy of a bundle.
    Steer(SteerArgs),
    /// Zero-shot evaluation, optionally with SAE steering.
    Eval(EvalArgs),
    /// Retrieval-augmented contrastive steering evaluation.
    Vs2pp(Vs2ppArgs),
    /// Accuracy over a gamma x lambda grid.
    Sweep(SweepArgs),
    /// Zero-out and negation ablations of the dominant features.
    Ablate(AblateArgs),
    /// Build per-class prototype codes.
    Prototypes(PrototypesArgs),
    /// Pairwise cosine similarity of per-class steering vectors.
    Orthogonality(OrthogonalityArgs),
    /// Rows that most strongly activate one latent.
    Coverage(CoverageArgs),
    /// Contrastive steering accuracy against neighbour count.
    Topn(TopnArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// The last CSV column holds integer class ids.
    #[arg(long)]
    pub labels: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value = "topk", value_parser = parse_mode)]
    pub mode: LossMode,
    #[arg(long, default_value_t = 64)]
    pub k: usize,
    #[arg(long, default_value_t = 4)]
    pub expansion: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.8)]
    pub w_aux: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.05)]
    pub warmup: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 512)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub dead_threshold: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "magnitude", value_parser = parse_selection)]
    pub selection: Selection,
    /// Optimizer steps between log records; 0 logs once per epoch.
    #[arg(long, default_value_t = 0)]
    pub log_every: usize,
}

#[derive(Debug, Args, Serialize, Clone, Copy)]
pub struct SteerKnobs {
    #[arg(long, default_value_t = DEFAULT_GAMMA, allow_negative_numbers = true)]
    pub gamma: f64,
    #[arg(long, default_value_t = DEFAULT_LAMBDA, allow_negative_numbers = true)]
    pub lambda: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SteerArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub knobs: SteerKnobs,
    /// reconstruction, amplified or steering.
    #[arg(long, default_value = "steering", value_parser = parse_steer_mode)]
    pub steer_mode: SteerMode,
    /// Sparsity override for the code.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    /// Steer with this SAE before classifying.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub knobs: SteerKnobs,
    #[arg(long, default_value = "steering", value_parser = parse_steer_mode)]
    pub steer_mode: SteerMode,
    #[arg(long)]
    pub k: Option<usize>,
    /// Report JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Top class gains and losses against the unsteered baseline.
    #[arg(long)]
    pub deltas: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CacheArgs {
    /// Cache manifest (JSON).
    #[arg(long, conflicts_with_all = ["corpus", "corpus_retrieval"])]
    pub cache: Option<PathBuf>,
    /// Steering-space corpus bundle.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Retrieval-space view of the corpus, joined by id.
    #[arg(long, requires = "corpus")]
    pub corpus_retrieval: Option<PathBuf>,
    /// Retrieval-space view of the test rows, same order as `--test`.
    #[arg(long)]
    pub test_retrieval: Option<PathBuf>,
    /// Write a manifest for the corpus given by `--corpus`.
    #[arg(long, requires = "corpus")]
    pub write_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Vs2ppMethod {
    /// Contrastive steering vector from neighbour groups.
    Contrastive,
    /// Similarity-weighted blend of the query and its neighbours.
    Rag,
}

#[derive(Debug, Args, Serialize)]
pub struct Vs2ppArgs {
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub cache: CacheArgs,
    #[arg(long, default_value_t = DEFAULT_NEIGHBORS)]
    pub neighbors: usize,
    /// oracle, pseudo-query or pseudo-majority.
    #[arg(long, default_value = "pseudo-query", value_parser = parse_policy)]
    pub policy: GroupPolicy,
    #[command(flatten)]
    pub knobs: SteerKnobs,
    #[arg(long, value_enum, default_value_t = Vs2ppMethod::Contrastive)]
    pub method: Vs2ppMethod,
    /// Query weight for the rag method.
    #[arg(long, default_value_t = 0.5)]
    pub rag_alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        allow_negative_numbers = true,
        default_value = "0.5,1,1.5,2,2.5"
    )]
    pub gammas: Vec<f64>,
    #[arg(
        long,
        value_delimiter = ',',
        allow_negative_numbers = true,
        default_value = "0,0.5,1,1.5,2.1,3"
    )]
    pub lambdas: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Heatmap of the grid.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub knobs: SteerKnobs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PrototypesArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Exemplars per class.
    #[arg(long, default_value_t = 10)]
    pub m: usize,
    /// Group exemplars by true label instead of the head's prediction.
    #[arg(long)]
    pub true_labels: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct OrthogonalityArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Prototype table written by `prototypes`.
    #[arg(long)]
    pub prototypes: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GAMMA, allow_negative_numbers = true)]
    pub gamma: f64,
    /// Number of most-similar pairs to list.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CoverageArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub feature: usize,
    #[arg(long, default_value_t = 10)]
    pub m: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TopnArgs {
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub cache: CacheArgs,
    #[arg(long, value_delimiter = ',', default_value = "10,25,50,100")]
    pub n_values: Vec<usize>,
    #[arg(long, default_value = "pseudo-query", value_parser = parse_policy)]
    pub policy: GroupPolicy,
    #[command(flatten)]
    pub knobs: SteerKnobs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub svg: Option<PathBuf>,
}
