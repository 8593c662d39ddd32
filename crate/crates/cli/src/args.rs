use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use memeforge_core::cluster::{DEFAULT_DELTA, DEFAULT_PCA_DIM};
use memeforge_core::metrics::F1Average;

#[derive(Debug, Parser)]
#[command(name = "memeforge", version, about = "Meme template identification pipeline")]
pub struct Cli {
    /// Seed for every randomised step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Input manifest.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Default root for artifacts when `--out` is not given.
    #[arg(
        long,
        global = true,
        env = "MEMEFORGE_DATA_DIR",
        default_value = ".",
        hide_env_values = true
    )]
    pub data_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute one feature row per manifest record into a feature store.
    Extract(ExtractArgs),
    /// Generate a seeded synthetic corpus with a manifest.
    Synth(SynthArgs),
    /// Stratified train/eval split of a manifest.
    Split(SplitArgs),
    /// List near-duplicate template pairs by embedding similarity.
    Dedup(DedupArgs),
    /// Fit a supervised method on a training manifest.
    Fit(FitArgs),
    /// Recalibrate the radius of a saved radius model.
    Calibrate(CalibrateArgs),
    /// Predict templates for every record of a manifest.
    Predict(PredictArgs),
    /// Match ORB descriptors between two images.
    Match(MatchArgs),
    /// Density-cluster a corpus and label the clusters.
    Cluster(ClusterArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FeatureArg {
    Phash,
    Rgb,
    Gray,
    Lbp,
    Baseline,
    Orb,
    Embedding,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long, value_enum)]
    pub feature: FeatureArg,
    /// Keep rows already present in the output store.
    #[arg(long)]
    pub resume: bool,
    /// Exit 0 even when some records fail.
    #[arg(long)]
    pub tolerate_errors: bool,
    /// Blur text boxes before grayscale features.
    #[arg(long)]
    pub blur_text: bool,
    /// Vectors for `--feature embedding`: JSON lines of `{"id", "vector"}`.
    #[arg(long)]
    pub from: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub templates: usize,
    #[arg(long, default_value_t = 30)]
    pub variants: usize,
    #[arg(long, default_value_t = 200)]
    pub nonmemes: usize,
    /// Upper bound on the caption area fraction of a variant.
    #[arg(long, default_value_t = 0.2)]
    pub coverage: f64,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
}

#[derive(Debug, Args)]
pub struct DedupArgs {
    /// Dense store of embeddings.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Cosine similarity threshold.
    #[arg(long, default_value_t = 0.95)]
    pub tau: f64,
}

/// Precomputed feature inputs.
#[derive(Debug, Args)]
pub struct FeatureInputs {
    /// Feature stores (phash, baseline or orb) to reuse instead of recomputing.
    #[arg(long = "store")]
    pub stores: Vec<PathBuf>,
    /// Dense store of externally computed embeddings.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

/// Method tunables.
#[derive(Debug, Args)]
pub struct Tuning {
    /// Fixed radius instead of leave-one-out calibration.
    #[arg(long)]
    pub radius: Option<f64>,
    /// Descriptor Hamming threshold for feature matching.
    #[arg(long, default_value_t = 27)]
    pub d: u32,
    /// Minimum matches for two images to be similar.
    #[arg(long, default_value_t = 20)]
    pub m: usize,
    /// Sparse coding penalty.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Sparsity concentration index below which sparse coding rejects.
    #[arg(long)]
    pub sci_threshold: Option<f64>,
    /// Reject MLR predictions whose top probability is below this.
    #[arg(long)]
    pub mlr_reject: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Cap on dictionary atoms per template.
    #[arg(long)]
    pub per_class_cap: Option<usize>,
    #[arg(long)]
    pub blur_text: bool,
    #[command(flatten)]
    pub cluster: ClusterTuning,
}

#[derive(Debug, Args)]
pub struct ClusterTuning {
    /// DBSCAN radius in pHash bits.
    #[arg(long, default_value_t = 8.0)]
    pub eps: f64,
    #[arg(long, default_value_t = 5)]
    pub min_pts: usize,
    #[arg(long, default_value_t = 5)]
    pub min_cluster_size: usize,
    /// HDBSCAN core-distance neighbour count (defaults to the cluster size).
    #[arg(long)]
    pub min_samples: Option<usize>,
    /// Medoid labelling distance in pHash bits.
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    pub delta: u32,
    #[arg(long, default_value_t = DEFAULT_PCA_DIM)]
    pub pca_dim: usize,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// `rnn:phash`, `rnn:embedding`, `rnn:fm`, `mlr:baseline` or `sparse`.
    #[arg(long)]
    pub method: String,
    #[command(flatten)]
    pub inputs: FeatureInputs,
    #[command(flatten)]
    pub tuning: Tuning,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Saved model; mutually exclusive with `--method`.
    #[arg(long, conflicts_with = "methods")]
    pub model: Option<PathBuf>,
    /// Methods to run end to end; repeatable.
    #[arg(long = "method", requires = "train")]
    pub methods: Vec<String>,
    /// Training manifest for `--method`.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[command(flatten)]
    pub inputs: FeatureInputs,
    #[command(flatten)]
    pub tuning: Tuning,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(long, default_value_t = 27)]
    pub d: u32,
    #[arg(long, default_value_t = 20)]
    pub m: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AlgoArg {
    Dbscan,
    Hdbscan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AnnotateArg {
    Majority,
    Medoid,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long, value_enum, default_value_t = AlgoArg::Dbscan)]
    pub algo: AlgoArg,
    #[arg(long, value_enum, default_value_t = AnnotateArg::Medoid)]
    pub annotate: AnnotateArg,
    /// Labeled training manifest; without it the labeled records of
    /// `--manifest` provide the labels.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Also write predictions for the `--manifest` records.
    #[arg(long)]
    pub preds: Option<PathBuf>,
    #[command(flatten)]
    pub inputs: FeatureInputs,
    #[command(flatten)]
    pub tuning: Tuning,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Majority verdicts exported by the annotation service.
    #[arg(long)]
    pub verdicts: Option<PathBuf>,
    #[arg(long, default_value = "weighted", value_parser = parse_f1)]
    pub f1: F1Average,
    /// Also report the model-templated and true-templated subsets.
    #[arg(long)]
    pub scenarios: bool,
    /// Print JSON instead of `key = value` lines.
    #[arg(long)]
    pub json: bool,
}

fn parse_f1(s: &str) -> Result<F1Average, String> {
    s.parse()
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    /// Judgment log (defaults to `judgments.log` under the data dir).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Built UI assets.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    /// Comma-separated annotator ids; any id is accepted when absent.
    #[arg(long, value_delimiter = ',')]
    pub annotators: Vec<String>,
}
