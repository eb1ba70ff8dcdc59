// dpq-core: compress descriptor databases with a trainable product quantizer.
//
// The pipeline: split each descriptor into M sub-vectors, quantize every
// sub-vector against a K-entry codebook (hard codes at inference, a
// softmax-relaxed assignment for gradients), then run the concatenated
// reconstruction through a small MLP decoder that learns to undo the
// quantization damage. Codebooks and decoder train jointly against ranking
// losses so that nearest-neighbor ordering survives compression. A separate
// QP selects which map points to keep when the code budget is tighter than
// the map.
//
// Module map:
//   numerics  - dense matrices, seeded RNG, Adam, finite-difference checker
//   binfmt    - little-endian binary readers/writers shared by file formats
//   store     - descriptor sets, scene point sets, synthetic data, .dsc/.scn
//   codebook  - k-means, PQ codebooks, hard encode/decode, .cbk/.qix
//   encoder   - straight-through differentiable quantization layer
//   decoder   - two-layer MLP dequantizer with optional low-rank adapters
//   loss      - triplet losses with in-batch hard negatives, L2, N-pair
//   train     - joint training loop, LoRA finetuning, reports, checkpoints
//   mapcomp   - capped-simplex QP for point selection, budget planner
//   eval      - recall benchmarks, ranking preservation, standard suite

pub mod binfmt;
pub mod codebook;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod loss;
pub mod mapcomp;
pub mod numerics;
pub mod store;
pub mod suite;
pub mod train;

pub use codebook::{code_bits, fit_codebook, pq_decode, pq_encode, Codebook, KmeansResult, QuantizedIndex};
pub use decoder::{decoder_backward, decoder_backward_lora, decoder_forward, DecoderForward, DecoderGrads, DecoderWeights, LoraDelta, LoraFactors, LoraGrads};
pub use encoder::{encode_backward, encode_forward, EncoderBackward, EncoderForward};
pub use error::{DpqError, Result};
pub use eval::{asymmetric_bench, noisy_queries, ranking_preservation, raw_bench, recall_at_k, reconstruction_errors, symmetric_bench, BenchResult};
pub use mapcomp::{build_kernel, plan_budget, project_capped_simplex, select_points, solve_map_qp, CompressionPlan, CompressionProblem, KernelKind, QpSolution, DEFAULT_QP_ITERS};
pub use loss::{l2_loss, mine_negatives, npair_in_batch, npair_loss, triplet_combined, triplet_with_frozen, LossConfig, LossVariant, MinedNegatives};
pub use numerics::{AdamParams, AdamState, Matrix, Rng};
pub use store::{synth_descriptors, synth_scene, DescriptorSet, ScenePointSet};
pub use suite::{
    initial_pq_recon, run_standard, short_run, standard_config, standard_l2_config,
    standard_set, standard_short_config, ShortRun, StandardRun,
};
pub use train::{finetune_lora, train, validate, EpochMetrics, TrainConfig, TrainReport, Trained, ValMetrics};
