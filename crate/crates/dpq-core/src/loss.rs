//! Training losses over a batch of raw descriptors and their
//! reconstructions.
//!
//! The main objective is a two-part triplet loss with in-batch hard
//! negative mining. For each row i with raw descriptor x_i and
//! reconstruction x̂_i:
//!
//!   pos_i     = ‖x_i − x̂_i‖                  (positive distance)
//!   neg_raw_i = min over eligible j of ‖x_j − x̂_i‖
//!   neg_d_i   = min over eligible j of ‖x̂_i − x̂_j‖
//!
//!   L = mean_i hinge(m + pos_i − neg_raw_i)
//!     + λ_d · mean_i hinge(m + pos_i − neg_d_i)
//!
//! where hinge(t) = max(t, 0). Eligible j means j ≠ i, and when group
//! labels are supplied, a different group from i (so near-duplicate
//! descriptors of the same physical point are never used as negatives).
//!
//! The second term pulls reconstructions apart from each other, which
//! matters when both sides of a search are compressed. Mined indices are
//! frozen before differentiation: gradients treat the argmins as
//! constants, which is exactly the subgradient of a min at its active
//! element.
//!
//! Two alternatives are provided: a plain mean-squared-error loss, and a
//! softmax-based multi-negative loss (`npair_loss`) that scores each
//! anchor against one positive and a set of negatives by inner product.

use rayon::prelude::*;

use crate::error::{DpqError, Result};
use crate::numerics::{dist, dot, Matrix};

/// Which training objective to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    /// Two-part triplet objective with mined negatives (the default).
    TripletCombined,
    /// Mean squared reconstruction error.
    L2,
    /// Softmax multi-negative loss over inner-product similarities.
    Npair,
}

impl LossVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossVariant::TripletCombined => "triplet_combined",
            LossVariant::L2 => "l2",
            LossVariant::Npair => "npair",
        }
    }

    pub fn parse(s: &str) -> Result<LossVariant> {
        match s {
            "triplet_combined" => Ok(LossVariant::TripletCombined),
            "l2" => Ok(LossVariant::L2),
            "npair" => Ok(LossVariant::Npair),
            other => Err(DpqError::Config(format!(
                "unknown loss variant '{other}' (expected triplet_combined, l2, or npair)"
            ))),
        }
    }
}

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Triplet margin m.
    pub margin: f64,
    /// Weight λ_d of the reconstruction-vs-reconstruction term.
    pub lambda_d: f64,
    /// Objective selector.
    pub variant: LossVariant,
    /// Tuple size for the softmax multi-negative loss.
    pub npair_n: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.9,
            lambda_d: 1.0,
            variant: LossVariant::TripletCombined,
            npair_n: 10,
        }
    }
}

/// Hard negatives mined within a batch, with the winning indices frozen
/// so a later gradient pass can treat them as constants.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedNegatives {
    /// ‖x_{raw_idx[i]} − x̂_i‖ at mining time.
    pub neg_raw: Vec<f64>,
    /// ‖x̂_i − x̂_{d_idx[i]}‖ at mining time.
    pub neg_d: Vec<f64>,
    /// Row of the nearest eligible raw descriptor to x̂_i.
    pub raw_idx: Vec<usize>,
    /// Row of the nearest eligible reconstruction to x̂_i.
    pub d_idx: Vec<usize>,
}

fn check_batch_shapes(batch_x: &Matrix, batch_xhat: &Matrix) -> Result<()> {
    if batch_x.rows() != batch_xhat.rows() || batch_x.cols() != batch_xhat.cols() {
        return Err(DpqError::Dimension(format!(
            "raw batch is {}x{}, reconstructions are {}x{}",
            batch_x.rows(),
            batch_x.cols(),
            batch_xhat.rows(),
            batch_xhat.cols()
        )));
    }
    Ok(())
}

/// Find, for every row, the nearest eligible raw descriptor and the
/// nearest eligible reconstruction. Ties break to the lowest index.
///
/// `groups`, when given, must have one label per row; rows sharing a
/// label are never offered as negatives for each other.
pub fn mine_negatives(
    batch_x: &Matrix,
    batch_xhat: &Matrix,
    groups: Option<&[u32]>,
) -> Result<MinedNegatives> {
    check_batch_shapes(batch_x, batch_xhat)?;
    let n = batch_x.rows();
    if n < 2 {
        return Err(DpqError::BatchTooSmall { need: 2, got: n });
    }
    if let Some(g) = groups {
        if g.len() != n {
            return Err(DpqError::Dimension(format!(
                "{} group labels for {} rows",
                g.len(),
                n
            )));
        }
    }

    let eligible = |i: usize, j: usize| -> bool {
        if i == j {
            return false;
        }
        match groups {
            Some(g) => g[i] != g[j],
            None => true,
        }
    };

    // Each row's result is written independently, so the batch can be
    // mined in parallel without affecting the outcome.
    let per_row: Vec<Result<(f64, usize, f64, usize)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xhat_i = batch_xhat.row(i);
            let mut best_raw = f64::INFINITY;
            let mut best_raw_j = usize::MAX;
            let mut best_d = f64::INFINITY;
            let mut best_d_j = usize::MAX;
            for j in 0..n {
                if !eligible(i, j) {
                    continue;
                }
                let dr = dist(batch_x.row(j), xhat_i);
                if dr < best_raw {
                    best_raw = dr;
                    best_raw_j = j;
                }
                let dd = dist(batch_xhat.row(j), xhat_i);
                if dd < best_d {
                    best_d = dd;
                    best_d_j = j;
                }
            }
            if best_raw_j == usize::MAX {
                // Every other row shares this row's group label.
                return Err(DpqError::BatchTooSmall { need: 2, got: 1 });
            }
            Ok((best_raw, best_raw_j, best_d, best_d_j))
        })
        .collect();

    let mut out = MinedNegatives {
        neg_raw: Vec::with_capacity(n),
        neg_d: Vec::with_capacity(n),
        raw_idx: Vec::with_capacity(n),
        d_idx: Vec::with_capacity(n),
    };
    for r in per_row {
        let (nr, ri, nd, di) = r?;
        out.neg_raw.push(nr);
        out.raw_idx.push(ri);
        out.neg_d.push(nd);
        out.d_idx.push(di);
    }
    Ok(out)
}

/// Two-part triplet loss with the negative indices already frozen.
/// Distances are recomputed from the current reconstructions, so this
/// function is differentiable in `batch_xhat` and suitable for numeric
/// gradient checks. Returns (loss, ∂loss/∂x̂).
pub fn triplet_with_frozen(
    batch_x: &Matrix,
    batch_xhat: &Matrix,
    mined: &MinedNegatives,
    cfg: &LossConfig,
) -> Result<(f64, Matrix)> {
    check_batch_shapes(batch_x, batch_xhat)?;
    let n = batch_x.rows();
    let d = batch_x.cols();
    if mined.raw_idx.len() != n || mined.d_idx.len() != n {
        return Err(DpqError::Dimension(format!(
            "mined indices cover {} rows, batch has {n}",
            mined.raw_idx.len()
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, d);

    for i in 0..n {
        let x_i = batch_x.row(i);
        let xhat_i = batch_xhat.row(i);
        let pos = dist(x_i, xhat_i);

        // Term 1: margin against the nearest raw descriptor.
        let j = mined.raw_idx[i];
        let neg_raw = dist(batch_x.row(j), xhat_i);
        let t1 = cfg.margin + pos - neg_raw;
        // Term 2: margin against the nearest reconstruction.
        let k = mined.d_idx[i];
        let neg_d = dist(batch_xhat.row(k), xhat_i);
        let t2 = cfg.margin + pos - neg_d;

        if t1 > 0.0 {
            loss += inv_n * t1;
        }
        if t2 > 0.0 {
            loss += cfg.lambda_d * inv_n * t2;
        }

        // Shared positive-distance gradient: d pos / d x̂_i = (x̂_i − x_i)/pos.
        // Each distance gets a zero subgradient if it is exactly zero.
        let pos_w = (t1 > 0.0) as u8 as f64 * inv_n
            + (t2 > 0.0) as u8 as f64 * cfg.lambda_d * inv_n;
        if pos_w != 0.0 && pos > 0.0 {
            let g = grad.row_mut(i);
            for c in 0..d {
                g[c] += pos_w * (xhat_i[c] - x_i[c]) / pos;
            }
        }
        if t1 > 0.0 && neg_raw > 0.0 {
            let x_j = batch_x.row(j);
            let g = grad.row_mut(i);
            for c in 0..d {
                g[c] -= inv_n * (xhat_i[c] - x_j[c]) / neg_raw;
            }
        }
        if t2 > 0.0 && neg_d > 0.0 {
            let w = cfg.lambda_d * inv_n / neg_d;
            // d neg_d / d x̂_i = (x̂_i − x̂_k)/neg_d, and the mirrored
            // contribution lands on the mined reconstruction row k.
            let xhat_k: Vec<f64> = batch_xhat.row(k).to_vec();
            {
                let g = grad.row_mut(i);
                for c in 0..d {
                    g[c] -= w * (xhat_i[c] - xhat_k[c]);
                }
            }
            let xhat_i_copy: Vec<f64> = batch_xhat.row(i).to_vec();
            let gk = grad.row_mut(k);
            for c in 0..d {
                gk[c] -= w * (xhat_k[c] - xhat_i_copy[c]);
            }
        }
    }
    Ok((loss, grad))
}

/// Mine hard negatives, then evaluate the two-part triplet loss with
/// those indices frozen. Returns (loss, ∂loss/∂x̂, mined negatives).
pub fn triplet_combined(
    batch_x: &Matrix,
    batch_xhat: &Matrix,
    groups: Option<&[u32]>,
    cfg: &LossConfig,
) -> Result<(f64, Matrix, MinedNegatives)> {
    let mined = mine_negatives(batch_x, batch_xhat, groups)?;
    let (loss, grad) = triplet_with_frozen(batch_x, batch_xhat, &mined, cfg)?;
    Ok((loss, grad, mined))
}

/// Mean squared reconstruction error: (1/N) Σ_i ‖x̂_i − x_i‖², with
/// gradient 2(x̂ − x)/N. Returns (loss, ∂loss/∂x̂).
pub fn l2_loss(batch_x: &Matrix, batch_xhat: &Matrix) -> Result<(f64, Matrix)> {
    check_batch_shapes(batch_x, batch_xhat)?;
    let n = batch_x.rows();
    if n == 0 {
        return Err(DpqError::BatchTooSmall { need: 1, got: 0 });
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, batch_x.cols());
    for i in 0..n {
        let x = batch_x.row(i);
        let xh = batch_xhat.row(i);
        let g = grad.row_mut(i);
        for c in 0..x.len() {
            let diff = xh[c] - x[c];
            loss += inv_n * diff * diff;
            g[c] = 2.0 * inv_n * diff;
        }
    }
    Ok((loss, grad))
}

/// Softmax multi-negative loss over inner products.
///
/// For anchor a_i with positive p_i and negatives n_{i1..i,nneg}:
///
///   L = (1/G) Σ_i log(1 + Σ_j exp(a_i·n_ij − a_i·p_i))
///
/// evaluated in a log-sum-exp-stabilized form so large similarities do
/// not overflow. Anchors are treated as constants; gradients flow to the
/// positives and negatives. `negatives` stacks each anchor's block of
/// `nneg` rows contiguously: row i·nneg + j is anchor i's j-th negative.
///
/// Returns (loss, ∂loss/∂positives, ∂loss/∂negatives).
pub fn npair_loss(
    anchors: &Matrix,
    positives: &Matrix,
    negatives: &Matrix,
    nneg: usize,
) -> Result<(f64, Matrix, Matrix)> {
    let g_count = anchors.rows();
    let d = anchors.cols();
    if g_count == 0 || nneg == 0 {
        return Err(DpqError::BatchTooSmall {
            need: 1,
            got: g_count.min(nneg),
        });
    }
    if positives.rows() != g_count || positives.cols() != d {
        return Err(DpqError::Dimension(format!(
            "positives are {}x{}, want {}x{}",
            positives.rows(),
            positives.cols(),
            g_count,
            d
        )));
    }
    if negatives.rows() != g_count * nneg || negatives.cols() != d {
        return Err(DpqError::Dimension(format!(
            "negatives are {}x{}, want {}x{}",
            negatives.rows(),
            negatives.cols(),
            g_count * nneg,
            d
        )));
    }

    let inv_g = 1.0 / g_count as f64;
    let mut loss = 0.0;
    let mut grad_pos = Matrix::zeros(g_count, d);
    let mut grad_neg = Matrix::zeros(g_count * nneg, d);

    for i in 0..g_count {
        let a = anchors.row(i);
        let ap = dot(a, positives.row(i));
        let z: Vec<f64> = (0..nneg)
            .map(|j| dot(a, negatives.row(i * nneg + j)) - ap)
            .collect();
        // log(1 + Σ e^{z_j}) = mz + log(e^{-mz} + Σ e^{z_j - mz}),
        // with mz = max(0, max_j z_j) so every exponent is ≤ 0.
        let mz = z.iter().fold(0.0_f64, |m, &v| m.max(v));
        let denom: f64 = (-mz).exp() + z.iter().map(|&v| (v - mz).exp()).sum::<f64>();
        loss += inv_g * (mz + denom.ln());

        // w_j = e^{z_j} / (1 + Σ e^{z_k}), in the same stabilized frame.
        let mut w_sum = 0.0;
        for (j, &zj) in z.iter().enumerate() {
            let w = (zj - mz).exp() / denom;
            w_sum += w;
            let gn = grad_neg.row_mut(i * nneg + j);
            for c in 0..d {
                gn[c] = inv_g * w * a[c];
            }
        }
        let gp = grad_pos.row_mut(i);
        for c in 0..d {
            gp[c] = -inv_g * w_sum * a[c];
        }
    }
    Ok((loss, grad_pos, grad_neg))
}

/// In-batch wrapper for the softmax multi-negative loss: rows are split
/// into consecutive tuples of `npair_n`; within a tuple, each row's raw
/// descriptor is the anchor, its reconstruction the positive, and the
/// other rows' reconstructions the negatives. A short tail of at least
/// two rows forms a smaller final tuple; a tail of one row is dropped.
///
/// Returns (loss, ∂loss/∂x̂) with the loss averaged over all anchors.
pub fn npair_in_batch(
    batch_x: &Matrix,
    batch_xhat: &Matrix,
    npair_n: usize,
) -> Result<(f64, Matrix)> {
    check_batch_shapes(batch_x, batch_xhat)?;
    let n = batch_x.rows();
    let d = batch_x.cols();
    if npair_n < 2 {
        return Err(DpqError::Config(format!(
            "npair tuple size must be at least 2, got {npair_n}"
        )));
    }
    if n < 2 {
        return Err(DpqError::BatchTooSmall { need: 2, got: n });
    }

    let mut total = 0.0;
    let mut anchors_used = 0usize;
    let mut grad = Matrix::zeros(n, d);

    let mut start = 0;
    while start < n {
        let end = (start + npair_n).min(n);
        let size = end - start;
        if size < 2 {
            break; // a lone trailing row has no negatives
        }
        let rows: Vec<usize> = (start..end).collect();
        let anchors = batch_x.select_rows(&rows)?;
        let positives = batch_xhat.select_rows(&rows)?;
        let nneg = size - 1;
        let mut neg_rows = Vec::with_capacity(size * nneg);
        for &i in &rows {
            for &j in &rows {
                if j != i {
                    neg_rows.push(j);
                }
            }
        }
        let negatives = batch_xhat.select_rows(&neg_rows)?;
        let (tuple_loss, grad_pos, grad_neg) =
            npair_loss(&anchors, &positives, &negatives, nneg)?;
        // npair_loss averages over its anchors; re-weight so the final
        // result is a mean over every anchor in the batch.
        total += tuple_loss * size as f64;
        anchors_used += size;
        for (local, &row) in rows.iter().enumerate() {
            let src = grad_pos.row(local).to_vec();
            let dst = grad.row_mut(row);
            for c in 0..d {
                dst[c] += src[c] * size as f64;
            }
        }
        for (slot, &row) in neg_rows.iter().enumerate() {
            let src = grad_neg.row(slot).to_vec();
            let dst = grad.row_mut(row);
            for c in 0..d {
                dst[c] += src[c] * size as f64;
            }
        }
        start = end;
    }

    let scale = 1.0 / anchors_used as f64;
    grad.scale(scale);
    Ok((total * scale, grad))
}
