//! Flag definitions. Every knob mirrors a config-file key one-to-one
//! (flag `--batch-size` ↔ key `batch_size`); a flag always overrides the
//! config file. All randomness flows from the single global `--seed`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub const EXIT_CODE_HELP: &str = "\
Exit codes:
  0   success
  2   usage error (unknown flag, missing required flag, bad flag value)
  3   config error (bad config file, invalid parameter value)
  4   input error (invalid request against otherwise well-formed data)
  5   io error (missing or unreadable/unwritable file)
  6   format error (malformed binary file)
  7   dimension error (shape mismatch between artifacts)
  8   numeric error (non-finite values)
  9   integrity error (artifact cross-references do not match)
  10  batch error (batch size exceeds split size)
  11  infeasible error (constraints admit no solution)
  12  training error (training diverged)

Every run writes exactly one manifest (JSON) recording the command, the
resolved config snapshot, input hashes, output paths and hashes, the seed,
and the tool version. Wall time is reported on stderr, not in the manifest,
so reruns stay byte-identical.";

#[derive(Debug, Parser)]
#[command(
    name = "dpq",
    version,
    about = "Product quantization with a learned dequantization decoder",
    after_long_help = EXIT_CODE_HELP,
    subcommand_required = true,
    arg_required_else_help = true
)]
pub struct Cli {
    /// Seed for all randomness in the run.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Cap on worker threads (default: one per logical CPU).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// key=value config file; flags override file entries.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Output path (single-file commands) or output stem (train,
    /// finetune-lora). Optional for budget and eval, which print to
    /// stdout when it is absent.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic descriptor sets or scene point sets.
    Synth {
        #[command(subcommand)]
        what: SynthWhat,
    },
    /// Fit a product-quantization codebook with k-means.
    Fit(FitArgs),
    /// Train codebook and dequantization decoder end to end.
    Train(TrainArgs),
    /// Fine-tune a trained decoder with a low-rank adapter.
    FinetuneLora(FinetuneLoraArgs),
    /// Encode descriptors to quantization codes.
    Quantize(QuantizeArgs),
    /// Decode quantization codes back to descriptors.
    Dequantize(DequantizeArgs),
    /// Select a weighted subset of scene points under a size ratio.
    CompressMap(CompressMapArgs),
    /// Plan how much of a database a byte budget admits.
    Budget(BudgetArgs),
    /// Benchmark raw vs quantized vs decoded representations.
    Eval(EvalArgs),
}

#[derive(Debug, Subcommand)]
pub enum SynthWhat {
    /// Gaussian-mixture descriptors on the unit sphere (.dsc).
    Descriptors(SynthDescriptorsArgs),
    /// Clustered 3D scene points with distinctiveness scores (.scn).
    Scene(SynthSceneArgs),
}

#[derive(Debug, Args)]
pub struct SynthDescriptorsArgs {
    /// Number of mixture clusters.
    #[arg(long, value_name = "N")]
    pub clusters: Option<usize>,
    /// Descriptors per cluster.
    #[arg(long, value_name = "N")]
    pub per_cluster: Option<usize>,
    /// Descriptor dimensionality.
    #[arg(long, value_name = "D")]
    pub dim: Option<usize>,
    /// Per-coordinate spread of members around their cluster center.
    #[arg(long, value_name = "S")]
    pub spread: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthSceneArgs {
    /// Number of 3D points.
    #[arg(long, value_name = "N")]
    pub points: Option<usize>,
    /// Number of spatial clusters.
    #[arg(long, value_name = "N")]
    pub clusters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Descriptor set to fit on (.dsc).
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Number of subspaces.
    #[arg(long, value_name = "M")]
    pub m: Option<usize>,
    /// Centroids per subspace.
    #[arg(long, value_name = "K")]
    pub k: Option<usize>,
    /// k-means iterations.
    #[arg(long, value_name = "N")]
    pub iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Descriptor set to train on (.dsc).
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    #[arg(long, value_name = "LR")]
    pub lr: Option<f64>,
    /// Triplet margin.
    #[arg(long, value_name = "M", allow_hyphen_values = true)]
    pub margin: Option<f64>,
    /// Soft-assignment temperature.
    #[arg(long, value_name = "T")]
    pub tau: Option<f64>,
    /// Weight of the dequantized-negative triplet term.
    #[arg(long, value_name = "L")]
    pub lambda_d: Option<f64>,
    /// Number of subspaces.
    #[arg(long, value_name = "M")]
    pub m: Option<usize>,
    /// Centroids per subspace.
    #[arg(long, value_name = "K")]
    pub k: Option<usize>,
    /// Decoder hidden width, or "none" for width = dim.
    #[arg(long, value_name = "H")]
    pub hidden: Option<String>,
    /// Adapter rank used when lora_mode is on.
    #[arg(long, value_name = "R")]
    pub lora_rank: Option<usize>,
    /// Freeze base weights and train only a low-rank adapter.
    #[arg(long, value_name = "BOOL")]
    pub lora_mode: Option<bool>,
    /// Training objective: triplet_combined, l2, or npair.
    #[arg(long, value_name = "NAME")]
    pub loss_variant: Option<String>,
    /// Tuple size for the npair objective.
    #[arg(long, value_name = "N")]
    pub npair_n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FinetuneLoraArgs {
    /// Adaptation descriptor set (.dsc).
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Frozen codebook (.cbk).
    #[arg(long, value_name = "FILE")]
    pub codebook: PathBuf,
    /// Base decoder to adapt (.dec).
    #[arg(long, value_name = "FILE")]
    pub decoder: PathBuf,
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    #[arg(long, value_name = "LR")]
    pub lr: Option<f64>,
    #[arg(long, value_name = "M", allow_hyphen_values = true)]
    pub margin: Option<f64>,
    #[arg(long, value_name = "T")]
    pub tau: Option<f64>,
    #[arg(long, value_name = "L")]
    pub lambda_d: Option<f64>,
    /// Adapter rank.
    #[arg(long, value_name = "R")]
    pub lora_rank: Option<usize>,
    /// Training objective: triplet_combined, l2, or npair.
    #[arg(long, value_name = "NAME")]
    pub loss_variant: Option<String>,
    #[arg(long, value_name = "N")]
    pub npair_n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Descriptor set to encode (.dsc).
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Codebook to encode with (.cbk).
    #[arg(long, value_name = "FILE")]
    pub codebook: PathBuf,
}

#[derive(Debug, Args)]
pub struct DequantizeArgs {
    /// Quantized index to decode (.qix).
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Codebook the index was encoded with (.cbk).
    #[arg(long, value_name = "FILE")]
    pub codebook: PathBuf,
    /// Optional decoder applied after hard decoding (.dec).
    #[arg(long, value_name = "FILE")]
    pub decoder: Option<PathBuf>,
    /// Optional low-rank adapter applied on top of the decoder (.dlt).
    #[arg(long, value_name = "FILE")]
    pub delta: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompressMapArgs {
    /// Scene point set (.scn).
    #[arg(long, value_name = "FILE")]
    pub scene: PathBuf,
    /// Compression ratio in (0, 1]: fraction of points to keep.
    #[arg(long, value_name = "A")]
    pub alpha: Option<f64>,
    /// Kernel: rbf (similarity) or distance.
    #[arg(long, value_name = "NAME")]
    pub kernel: Option<String>,
    /// RBF bandwidth (default: median pairwise distance).
    #[arg(long, value_name = "S")]
    pub sigma: Option<f64>,
    /// Weight of the distinctiveness term.
    #[arg(long, value_name = "T")]
    pub tau: Option<f64>,
    /// Projected-gradient iteration budget.
    #[arg(long, value_name = "N")]
    pub iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BudgetArgs {
    /// Byte budget for the stored codes.
    #[arg(long, value_name = "B")]
    pub bytes: Option<u64>,
    /// Number of database points.
    #[arg(long, value_name = "N")]
    pub n: Option<usize>,
    /// Number of subspaces.
    #[arg(long, value_name = "M")]
    pub m: Option<usize>,
    /// Centroids per subspace.
    #[arg(long, value_name = "K")]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Descriptor set to benchmark on (.dsc).
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Codebook to benchmark (.cbk).
    #[arg(long, value_name = "FILE")]
    pub codebook: PathBuf,
    /// Optional decoder defining the dequantized representation (.dec).
    #[arg(long, value_name = "FILE")]
    pub decoder: Option<PathBuf>,
    /// Optional low-rank adapter applied on top of the decoder (.dlt).
    #[arg(long, value_name = "FILE")]
    pub delta: Option<PathBuf>,
    /// Query noise sigma.
    #[arg(long, value_name = "S")]
    pub noise: Option<f64>,
}
