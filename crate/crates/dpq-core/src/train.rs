//! End-to-end training: fit a codebook, initialize a decoder, and
//! optimize both through the quantization bottleneck.
//!
//! Each step runs a batch through quantize → reconstruct → decode,
//! scores the decoded output against the raw descriptors with the
//! configured loss, and backpropagates through the decoder and the
//! straight-through encoder so the gradient reaches both the decoder
//! weights and the centroids themselves. One optimizer state covers the
//! concatenation of every trainable tensor.
//!
//! Two freezing regimes exist: full training (centroids + decoder), and
//! adapter-only finetuning where the codebook and base decoder weights
//! stay bitwise frozen and only the low-rank factors move — the cheap
//! per-scene specialization path.
//!
//! Determinism contract: for a fixed config (seed included) the
//! produced codebook and decoder are bitwise reproducible. All
//! randomness flows through named substreams of the config seed, and
//! the batch order is one fixed permutation reused across epochs, so a
//! zero learning rate provably reproduces identical losses every epoch.

use sha2::{Digest, Sha256};

use crate::codebook::{fit_codebook, pq_decode, pq_encode, Codebook};
use crate::decoder::{
    decoder_backward, decoder_backward_lora, decoder_forward, DecoderWeights,
};
use crate::encoder::{encode_backward, encode_forward};
use crate::error::{DpqError, Result};
use crate::eval::{compress_rows, recall_at_k, reconstruction_errors};
use crate::loss::{l2_loss, npair_in_batch, triplet_combined, LossConfig, LossVariant};
use crate::numerics::{derive_seed, AdamParams, AdamState, Matrix, Rng};
use crate::store::DescriptorSet;

/// Lloyd iterations used when fitting codebooks for training.
pub const KMEANS_ITERS: usize = 25;

/// Fraction of rows held out for validation.
const VAL_FRACTION: usize = 10; // one tenth

/// Everything that controls a training run. Serializes to and from a
/// flat `key=value` file; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Passes over the training split.
    pub epochs: usize,
    /// Rows per optimizer step; a trailing short batch is dropped.
    pub batch_size: usize,
    /// Adam learning rate.
    pub lr: f64,
    /// Triplet margin.
    pub margin: f64,
    /// Softmax temperature of the straight-through encoder.
    pub tau: f64,
    /// Weight of the reconstruction-vs-reconstruction triplet term.
    pub lambda_d: f64,
    /// Number of quantizer subspaces.
    pub m: usize,
    /// Centroids per subspace.
    pub k: usize,
    /// Decoder hidden width; `None` means "same as the input dim".
    pub hidden: Option<usize>,
    /// Rank of the low-rank adapter used when finetuning.
    pub lora_rank: usize,
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    /// Train only adapter factors, freezing centroids and base weights.
    pub lora_mode: bool,
    /// Which objective to optimize.
    pub loss_variant: LossVariant,
    /// Tuple size for the softmax multi-negative objective.
    pub npair_n: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 1000,
            lr: 0.001,
            margin: 0.9,
            tau: 0.05,
            lambda_d: 1.0,
            m: 4,
            k: 256,
            hidden: None,
            lora_rank: 2,
            seed: 0,
            lora_mode: false,
            loss_variant: LossVariant::TripletCombined,
            npair_n: 10,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        DpqError::Config(format!("bad value '{value}' for key '{key}'"))
    })
}

impl TrainConfig {
    /// Apply one `key=value` override.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "margin" => self.margin = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "lambda_d" => self.lambda_d = parse_num(key, value)?,
            "m" => self.m = parse_num(key, value)?,
            "k" => self.k = parse_num(key, value)?,
            "hidden" => {
                self.hidden = if value == "none" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "lora_rank" => self.lora_rank = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "lora_mode" => {
                self.lora_mode = match value {
                    "true" => true,
                    "false" => false,
                    _ => {
                        return Err(DpqError::Config(format!(
                            "bad value '{value}' for key 'lora_mode' (expected true or false)"
                        )))
                    }
                }
            }
            "loss_variant" => self.loss_variant = LossVariant::parse(value)?,
            "npair_n" => self.npair_n = parse_num(key, value)?,
            other => {
                return Err(DpqError::Config(format!("unknown config key '{other}'")))
            }
        }
        Ok(())
    }

    /// Parse a flat `key=value` config file. `#` starts a comment; blank
    /// lines are ignored; keys not listed keep their defaults.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DpqError::Config(format!(
                    "line {}: expected key=value, got '{line}'",
                    lineno + 1
                ))
            })?;
            cfg.set_key(key.trim(), value.trim()).map_err(|e| {
                DpqError::Config(format!("line {}: {e}", lineno + 1))
            })?;
        }
        Ok(cfg)
    }

    /// Canonical `key=value` rendering; `parse` of the result gives back
    /// an identical config.
    pub fn to_config_string(&self) -> String {
        let hidden = match self.hidden {
            Some(h) => h.to_string(),
            None => "none".to_string(),
        };
        format!(
            "epochs={}\nbatch_size={}\nlr={}\nmargin={}\ntau={}\nlambda_d={}\nm={}\nk={}\nhidden={}\nlora_rank={}\nseed={}\nlora_mode={}\nloss_variant={}\nnpair_n={}\n",
            self.epochs,
            self.batch_size,
            self.lr,
            self.margin,
            self.tau,
            self.lambda_d,
            self.m,
            self.k,
            hidden,
            self.lora_rank,
            self.seed,
            self.lora_mode,
            self.loss_variant.as_str(),
            self.npair_n,
        )
    }

    fn check(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(DpqError::Config(format!(
                "learning rate must be non-negative and finite, got {}",
                self.lr
            )));
        }
        if self.batch_size < 2 {
            return Err(DpqError::Config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.loss_variant == LossVariant::Npair && self.npair_n < 2 {
            return Err(DpqError::Config(format!(
                "npair tuple size must be at least 2, got {}",
                self.npair_n
            )));
        }
        Ok(())
    }

    fn loss_config(&self) -> LossConfig {
        LossConfig {
            margin: self.margin,
            lambda_d: self.lambda_d,
            variant: self.loss_variant,
            npair_n: self.npair_n,
        }
    }
}

/// Validation metrics after an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct ValMetrics {
    /// Configured loss evaluated on the whole validation split.
    pub loss: f64,
    /// Mean per-row reconstruction error on the validation split.
    pub recon_mean: f64,
    /// Median per-row reconstruction error.
    pub recon_median: f64,
    /// Recall@1 of raw validation queries against their reconstructions.
    pub recall1: f64,
}

/// One epoch's row in the report.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub recon_mean: f64,
    pub recon_median: f64,
    pub recall1: f64,
}

/// Full record of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean validation reconstruction error of the plain quantizer
    /// before any decoding or training — the baseline to beat.
    pub initial_pq_recon: f64,
    /// One entry per epoch, in order.
    pub epochs: Vec<EpochMetrics>,
    /// Hex SHA-256 of the final codebook bytes.
    pub codebook_hash: String,
    /// Hex SHA-256 of the final decoder bytes.
    pub decoder_hash: String,
    /// Canonical snapshot of the config that produced this run.
    pub config: String,
}

impl TrainReport {
    /// Render as a tab-separated report: comment header, then one line
    /// per epoch.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# initial_pq_recon\t{}\n", self.initial_pq_recon));
        out.push_str(&format!("# codebook_hash\t{}\n", self.codebook_hash));
        out.push_str(&format!("# decoder_hash\t{}\n", self.decoder_hash));
        out.push_str("epoch\ttrain_loss\tval_loss\trecon_mean\trecon_median\trecall1\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.epoch, e.train_loss, e.val_loss, e.recon_mean, e.recon_median, e.recall1
            ));
        }
        out
    }
}

/// Output of a training run.
#[derive(Debug, Clone)]
pub struct Trained {
    pub codebook: Codebook,
    pub decoder: DecoderWeights,
    pub report: TrainReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Full,
    AdapterOnly,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn decoder_hash(dec: &DecoderWeights) -> String {
    hex(&Sha256::digest(dec.to_bytes()))
}

/// Concatenate every trainable tensor for the given mode into one flat
/// vector (the optimizer's view of the model).
fn pack_params(cb: &Codebook, dec: &DecoderWeights, mode: Mode) -> Vec<f64> {
    match mode {
        Mode::Full => {
            let mut flat = cb.centroids().data().to_vec();
            flat.extend_from_slice(dec.w1().data());
            flat.extend_from_slice(dec.w2().data());
            flat
        }
        Mode::AdapterOnly => {
            let f = dec.lora().expect("adapter mode requires factors");
            let mut flat = f.a1().data().to_vec();
            flat.extend_from_slice(f.b1().data());
            flat.extend_from_slice(f.a2().data());
            flat.extend_from_slice(f.b2().data());
            flat
        }
    }
}

fn unpack_params(flat: &[f64], cb: &mut Codebook, dec: &mut DecoderWeights, mode: Mode) {
    match mode {
        Mode::Full => {
            let nc = cb.centroids().data().len();
            let n1 = dec.w1().data().len();
            cb.centroids_mut().data_mut().copy_from_slice(&flat[..nc]);
            dec.w1_mut().data_mut().copy_from_slice(&flat[nc..nc + n1]);
            dec.w2_mut().data_mut().copy_from_slice(&flat[nc + n1..]);
        }
        Mode::AdapterOnly => {
            let f = dec.lora_mut().expect("adapter mode requires factors");
            let (na1, nb1, na2) = (
                f.a1().data().len(),
                f.b1().data().len(),
                f.a2().data().len(),
            );
            f.a1_mut().data_mut().copy_from_slice(&flat[..na1]);
            f.b1_mut()
                .data_mut()
                .copy_from_slice(&flat[na1..na1 + nb1]);
            f.a2_mut()
                .data_mut()
                .copy_from_slice(&flat[na1 + nb1..na1 + nb1 + na2]);
            f.b2_mut()
                .data_mut()
                .copy_from_slice(&flat[na1 + nb1 + na2..]);
        }
    }
}

/// Evaluate the configured loss on a batch. Returns the loss and its
/// gradient with respect to the decoded reconstructions.
fn compute_loss(
    batch_x: &Matrix,
    xhat: &Matrix,
    groups: Option<&[u32]>,
    cfg: &TrainConfig,
) -> Result<(f64, Matrix)> {
    match cfg.loss_variant {
        LossVariant::TripletCombined => {
            let (loss, grad, _) = triplet_combined(batch_x, xhat, groups, &cfg.loss_config())?;
            Ok((loss, grad))
        }
        LossVariant::L2 => l2_loss(batch_x, xhat),
        LossVariant::Npair => npair_in_batch(batch_x, xhat, cfg.npair_n),
    }
}

/// Score the current pipeline on the validation split: configured loss,
/// reconstruction errors, and recall@1 of raw queries against the
/// reconstructed database.
pub fn validate(
    val: &DescriptorSet,
    cb: &Codebook,
    dec: &DecoderWeights,
    cfg: &TrainConfig,
) -> Result<ValMetrics> {
    let xhat = compress_rows(val.data(), cb, Some(dec))?;
    let (loss, _) = compute_loss(val.data(), &xhat, val.groups(), cfg)?;
    let (recon_mean, recon_median) = reconstruction_errors(val.data(), &xhat)?;
    let gt: Vec<usize> = (0..val.n()).collect();
    let recall1 = recall_at_k(val.data(), &xhat, &gt, 1)?;
    Ok(ValMetrics {
        loss,
        recon_mean,
        recon_median,
        recall1,
    })
}

/// Split rows into train and validation index sets: a seeded shuffle
/// assigns one row in `VAL_FRACTION` (at least two) to validation.
fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 * VAL_FRACTION {
        return Err(DpqError::Input(format!(
            "need at least {} descriptors to split off a validation set, got {n}",
            2 * VAL_FRACTION
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::seeded(derive_seed(seed, "split"));
    rng.shuffle(&mut order);
    let n_val = n / VAL_FRACTION;
    let val = order[..n_val].to_vec();
    let train = order[n_val..].to_vec();
    Ok((train, val))
}

/// Mean reconstruction error of the plain quantizer (no decoder) on a
/// set — the pre-training baseline.
fn plain_pq_recon(set: &DescriptorSet, cb: &Codebook) -> Result<f64> {
    let recon = pq_decode(cb, &pq_encode(set.data(), cb)?)?;
    Ok(reconstruction_errors(set.data(), &recon)?.0)
}

/// The shared epoch loop. In `Full` mode the centroids and base decoder
/// weights train; in `AdapterOnly` mode only the low-rank factors move
/// and the codebook is never written.
fn train_loop(
    train_set: &DescriptorSet,
    val_set: &DescriptorSet,
    cb: &mut Codebook,
    dec: &mut DecoderWeights,
    cfg: &TrainConfig,
    mode: Mode,
    initial_pq_recon: f64,
) -> Result<TrainReport> {
    let n_train = train_set.n();
    let batches = n_train / cfg.batch_size;
    if batches == 0 {
        return Err(DpqError::Config(format!(
            "batch size {} exceeds the training split of {n_train} rows",
            cfg.batch_size
        )));
    }

    // One permutation, derived from the seed alone and reused every
    // epoch: batch composition is part of the reproducibility contract.
    let mut order: Vec<usize> = (0..n_train).collect();
    Rng::seeded(derive_seed(cfg.seed, "perm")).shuffle(&mut order);

    let ap = AdamParams::with_lr(cfg.lr);
    let mut adam = AdamState::new(pack_params(cb, dec, mode).len());

    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        for b in 0..batches {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let bx = train_set.data().select_rows(idx)?;
            let groups: Option<Vec<u32>> = train_set
                .groups()
                .map(|g| idx.iter().map(|&i| g[i]).collect());

            let enc = encode_forward(&bx, cb, cfg.tau)?;
            let q = enc.output().clone();
            let dfwd = decoder_forward(&q, dec)?;
            let (loss, grad_xhat) = compute_loss(&bx, dfwd.output(), groups.as_deref(), cfg)?;
            if !loss.is_finite() {
                return Err(DpqError::Training {
                    epoch,
                    batch: b,
                    what: format!("loss became non-finite ({loss})"),
                });
            }
            loss_sum += loss;

            let grads: Vec<f64> = match mode {
                Mode::Full => {
                    let dg = decoder_backward(&dfwd, &q, dec, &grad_xhat)?;
                    let eg = encode_backward(&enc, &bx, cb, &dg.grad_input)?;
                    let mut flat = eg.grad_centroids.data().to_vec();
                    flat.extend_from_slice(dg.grad_w1.data());
                    flat.extend_from_slice(dg.grad_w2.data());
                    flat
                }
                Mode::AdapterOnly => {
                    let lg = decoder_backward_lora(&dfwd, &q, dec, &grad_xhat)?;
                    let mut flat = lg.grad_a1.data().to_vec();
                    flat.extend_from_slice(lg.grad_b1.data());
                    flat.extend_from_slice(lg.grad_a2.data());
                    flat.extend_from_slice(lg.grad_b2.data());
                    flat
                }
            };

            let mut flat = pack_params(cb, dec, mode);
            adam.step(&mut flat, &grads, &ap).map_err(|e| {
                DpqError::Training {
                    epoch,
                    batch: b,
                    what: e.to_string(),
                }
            })?;
            unpack_params(&flat, cb, dec, mode);
        }

        let val = validate(val_set, cb, dec, cfg)?;
        if !val.loss.is_finite() {
            return Err(DpqError::Training {
                epoch,
                batch: batches,
                what: format!("validation loss became non-finite ({})", val.loss),
            });
        }
        epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss: val.loss,
            recon_mean: val.recon_mean,
            recon_median: val.recon_median,
            recall1: val.recall1,
        });
    }

    Ok(TrainReport {
        initial_pq_recon,
        epochs,
        codebook_hash: hex(&cb.content_hash()),
        decoder_hash: decoder_hash(dec),
        config: cfg.to_config_string(),
    })
}

/// Train a codebook and decoder from scratch on a descriptor set.
///
/// Fits the quantizer on the training split, initializes the decoder,
/// and optimizes per the config. With `lora_mode` set, the fitted
/// centroids and freshly initialized base weights stay frozen and only
/// adapter factors train (useful mainly for experiments; see
/// [`finetune_lora`] for the intended adapter workflow).
pub fn train(set: &DescriptorSet, cfg: &TrainConfig) -> Result<Trained> {
    cfg.check()?;
    let (train_idx, val_idx) = split_indices(set.n(), cfg.seed)?;
    let train_set = set.select(&train_idx)?;
    let val_set = set.select(&val_idx)?;

    let mut cb = fit_codebook(
        &train_set,
        cfg.m,
        cfg.k,
        KMEANS_ITERS,
        derive_seed(cfg.seed, "codebook"),
    )?;
    let initial_pq_recon = plain_pq_recon(&val_set, &cb)?;

    let hidden = cfg.hidden.unwrap_or(set.dim());
    let mut dec = DecoderWeights::init(set.dim(), hidden, derive_seed(cfg.seed, "decoder"))?;
    let mode = if cfg.lora_mode {
        dec.init_lora(cfg.lora_rank, derive_seed(cfg.seed, "lora"))?;
        Mode::AdapterOnly
    } else {
        Mode::Full
    };

    let report = train_loop(
        &train_set,
        &val_set,
        &mut cb,
        &mut dec,
        cfg,
        mode,
        initial_pq_recon,
    )?;
    Ok(Trained {
        codebook: cb,
        decoder: dec,
        report,
    })
}

/// Specialize a trained decoder to a new descriptor set by training a
/// fresh low-rank adapter. The codebook and the base weights are
/// bitwise unchanged; only the returned decoder's factors differ. With
/// zero epochs the adapter is freshly initialized (B = 0), so the
/// returned decoder reproduces the base forward pass exactly.
pub fn finetune_lora(
    set: &DescriptorSet,
    cb: &Codebook,
    base: &DecoderWeights,
    cfg: &TrainConfig,
) -> Result<(DecoderWeights, TrainReport)> {
    cfg.check()?;
    if set.dim() != base.dim() {
        return Err(DpqError::Dimension(format!(
            "descriptors have dim {}, decoder expects {}",
            set.dim(),
            base.dim()
        )));
    }
    if set.dim() != cb.dim() {
        return Err(DpqError::Dimension(format!(
            "descriptors have dim {}, codebook expects {}",
            set.dim(),
            cb.dim()
        )));
    }
    let (train_idx, val_idx) = split_indices(set.n(), cfg.seed)?;
    let train_set = set.select(&train_idx)?;
    let val_set = set.select(&val_idx)?;

    let initial_pq_recon = plain_pq_recon(&val_set, cb)?;
    let mut dec = base.clone();
    dec.init_lora(cfg.lora_rank, derive_seed(cfg.seed, "lora"))?;

    // Adapter mode never writes the codebook; the local copy only
    // satisfies the shared loop's signature.
    let mut cb_local = cb.clone();
    let report = train_loop(
        &train_set,
        &val_set,
        &mut cb_local,
        &mut dec,
        cfg,
        Mode::AdapterOnly,
        initial_pq_recon,
    )?;
    debug_assert_eq!(cb_local.content_hash(), cb.content_hash());
    Ok((dec, report))
}
