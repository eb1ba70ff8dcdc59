//! Retrieval benchmarks: measure what compression does to search
//! quality on a descriptor set whose ground truth is known.
//!
//! Queries are noisy copies of the database rows (query i's true match
//! is row i), searched by exact brute force. Three database/query
//! configurations are compared:
//!
//! * raw         — both sides uncompressed (the reference ceiling)
//! * asymmetric  — database compressed and reconstructed, queries raw
//! * symmetric   — both sides pushed through the compression pipeline
//!
//! Reported per configuration: reconstruction error of the database
//! (mean and median row L2), recall@1 and recall@5, a ranking
//! preservation score, the payload bytes per vector, and the fixed
//! overhead (codebook + decoder) that a deployment would ship once.

use rayon::prelude::*;

use crate::codebook::{code_bits, pq_decode, pq_encode, Codebook};
use crate::decoder::{decoder_forward, DecoderWeights};
use crate::error::{DpqError, Result};
use crate::numerics::{derive_seed, dist, squared_dist, Matrix, Rng};
use crate::store::DescriptorSet;

/// Distance differences smaller than this are treated as ties when
/// comparing rankings.
pub const RANK_TIE_TOL: f64 = 1e-12;

/// Default number of sampled triples for ranking preservation.
pub const DEFAULT_RANK_TRIPLES: usize = 2000;

/// Metrics for one database/query configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    /// Configuration label ("raw", "pq", "pq+decoder", ...).
    pub method: String,
    /// Payload bytes stored per database vector.
    pub bytes_per_vector: f64,
    /// Mean per-row L2 error between raw and reconstructed database.
    pub recon_mean: f64,
    /// Median per-row L2 error.
    pub recon_median: f64,
    /// Fraction of queries whose true row is the top result.
    pub recall1: f64,
    /// Fraction of queries whose true row is in the top five.
    pub recall5: f64,
    /// Fraction of sampled distance comparisons whose order survives
    /// compression.
    pub ranking_preservation: f64,
    /// One-time bytes shipped alongside the codes (codebook, decoder).
    pub overhead_bytes: u64,
}

/// Indices of the k nearest database rows to `query`, nearest first.
/// Ties break to the lower row index.
fn top_k_rows(query: &[f64], db: &Matrix, k: usize) -> Vec<usize> {
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for j in 0..db.rows() {
        let d = squared_dist(query, db.row(j));
        let key = (d, j);
        if best.len() < k || key < *best.last().expect("non-empty") {
            let pos = best.partition_point(|&b| b < key);
            best.insert(pos, key);
            best.truncate(k);
        }
    }
    best.into_iter().map(|(_, j)| j).collect()
}

/// Fraction of queries whose ground-truth row appears in the top k.
/// `ground_truth[q]` is the database row that query q should retrieve.
pub fn recall_at_k(
    queries: &Matrix,
    db: &Matrix,
    ground_truth: &[usize],
    k: usize,
) -> Result<f64> {
    if queries.cols() != db.cols() {
        return Err(DpqError::Dimension(format!(
            "queries have dim {}, database has dim {}",
            queries.cols(),
            db.cols()
        )));
    }
    if ground_truth.len() != queries.rows() {
        return Err(DpqError::Dimension(format!(
            "{} ground-truth labels for {} queries",
            ground_truth.len(),
            queries.rows()
        )));
    }
    if queries.rows() == 0 || db.rows() == 0 {
        return Err(DpqError::Input("empty query or database set".into()));
    }
    if k == 0 {
        return Err(DpqError::Config("recall depth k must be positive".into()));
    }
    if let Some(&bad) = ground_truth.iter().find(|&&g| g >= db.rows()) {
        return Err(DpqError::Input(format!(
            "ground-truth row {bad} outside database of {} rows",
            db.rows()
        )));
    }
    // Each query is scored independently; parallel evaluation cannot
    // change the result.
    let hits: usize = (0..queries.rows())
        .into_par_iter()
        .map(|q| top_k_rows(queries.row(q), db, k).contains(&ground_truth[q]) as usize)
        .sum();
    Ok(hits as f64 / queries.rows() as f64)
}

/// Mean and median of per-row L2 distance between two aligned matrices.
pub fn reconstruction_errors(raw: &Matrix, recon: &Matrix) -> Result<(f64, f64)> {
    if raw.rows() != recon.rows() || raw.cols() != recon.cols() {
        return Err(DpqError::Dimension(format!(
            "raw is {}x{}, reconstruction is {}x{}",
            raw.rows(),
            raw.cols(),
            recon.rows(),
            recon.cols()
        )));
    }
    if raw.rows() == 0 {
        return Err(DpqError::Input("no rows to compare".into()));
    }
    let mut errs: Vec<f64> = (0..raw.rows())
        .map(|i| dist(raw.row(i), recon.row(i)))
        .collect();
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    errs.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let mid = errs.len() / 2;
    let median = if errs.len() % 2 == 1 {
        errs[mid]
    } else {
        0.5 * (errs[mid - 1] + errs[mid])
    };
    Ok((mean, median))
}

fn rank_sign(x: f64) -> i8 {
    if x.abs() <= RANK_TIE_TOL {
        0
    } else if x > 0.0 {
        1
    } else {
        -1
    }
}

/// Sample `n_triples` row triples (a, b, c) with b ≠ c and report the
/// fraction where the order of ‖a−b‖ vs ‖a−c‖ in the original rows
/// survives in the compressed rows. Differences within `RANK_TIE_TOL`
/// are ties, and ties count as preserved: only a strict sign
/// disagreement loses a triple.
pub fn ranking_preservation(
    original: &Matrix,
    compressed: &Matrix,
    n_triples: usize,
    seed: u64,
) -> Result<f64> {
    if original.rows() != compressed.rows() {
        return Err(DpqError::Dimension(format!(
            "original has {} rows, compressed has {}",
            original.rows(),
            compressed.rows()
        )));
    }
    let n = original.rows();
    if n < 3 {
        return Err(DpqError::Input(
            "ranking needs at least three rows".into(),
        ));
    }
    if n_triples == 0 {
        return Err(DpqError::Config("need at least one ranking triple".into()));
    }
    let mut rng = Rng::seeded(derive_seed(seed, "eval.rank"));
    let mut preserved = 0usize;
    for _ in 0..n_triples {
        // Three distinct rows: the anchor a and two candidates b, c.
        let a = rng.range(n);
        let mut b = rng.range(n - 1);
        if b >= a {
            b += 1;
        }
        let mut c = rng.range(n - 2);
        for lower in [a.min(b), a.max(b)] {
            if c >= lower {
                c += 1;
            }
        }
        let orig_diff = dist(original.row(a), original.row(b))
            - dist(original.row(a), original.row(c));
        let comp_diff = dist(compressed.row(a), compressed.row(b))
            - dist(compressed.row(a), compressed.row(c));
        let (so, sc) = (rank_sign(orig_diff), rank_sign(comp_diff));
        if so == sc || so == 0 || sc == 0 {
            preserved += 1;
        }
    }
    Ok(preserved as f64 / n_triples as f64)
}

/// Perturb every row with isotropic Gaussian noise of the given sigma.
/// Deterministic in (seed); sigma 0 returns the data unchanged.
pub fn noisy_queries(data: &Matrix, sigma: f64, seed: u64) -> Result<Matrix> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(DpqError::Config(format!(
            "noise sigma must be non-negative and finite, got {sigma}"
        )));
    }
    let mut rng = Rng::seeded(derive_seed(seed, "eval.noise"));
    let mut out = data.clone();
    if sigma > 0.0 {
        for v in out.data_mut() {
            *v += sigma * rng.normal();
        }
    }
    Ok(out)
}

/// Push rows through the full compression pipeline: quantize, decode,
/// and optionally run the learned decoder on the reconstruction.
pub fn compress_rows(
    data: &Matrix,
    cb: &Codebook,
    decoder: Option<&DecoderWeights>,
) -> Result<Matrix> {
    let codes = pq_encode(data, cb)?;
    let recon = pq_decode(cb, &codes)?;
    match decoder {
        None => Ok(recon),
        Some(w) => Ok(decoder_forward(&recon, w)?.output().clone()),
    }
}

/// Score one configuration. Ranking preservation compares the raw
/// database rows against their compressed counterparts, so it measures
/// what compression alone did to the distance structure.
fn bench_with(
    set: &DescriptorSet,
    queries: &Matrix,
    db: &Matrix,
    method: &str,
    bytes_per_vector: f64,
    overhead_bytes: u64,
    n_triples: usize,
    seed: u64,
) -> Result<BenchResult> {
    let gt: Vec<usize> = (0..set.n()).collect();
    let (recon_mean, recon_median) = reconstruction_errors(set.data(), db)?;
    Ok(BenchResult {
        method: method.to_string(),
        bytes_per_vector,
        recon_mean,
        recon_median,
        recall1: recall_at_k(queries, db, &gt, 1)?,
        recall5: recall_at_k(queries, db, &gt, 5)?,
        ranking_preservation: ranking_preservation(set.data(), db, n_triples, seed)?,
        overhead_bytes,
    })
}

/// Exact search on uncompressed data: the quality ceiling.
pub fn raw_bench(set: &DescriptorSet, noise_sigma: f64, seed: u64) -> Result<BenchResult> {
    let queries = noisy_queries(set.data(), noise_sigma, seed)?;
    bench_with(
        set,
        &queries,
        set.data(),
        "raw",
        set.dim() as f64 * 4.0,
        0,
        DEFAULT_RANK_TRIPLES,
        seed,
    )
}

/// Compressed database, raw queries.
pub fn asymmetric_bench(
    set: &DescriptorSet,
    noise_sigma: f64,
    cb: &Codebook,
    decoder: Option<&DecoderWeights>,
    seed: u64,
) -> Result<BenchResult> {
    let queries = noisy_queries(set.data(), noise_sigma, seed)?;
    let db = compress_rows(set.data(), cb, decoder)?;
    let bytes = code_bits(cb.m(), cb.k())? as f64 / 8.0;
    let overhead = pipeline_overhead(cb, decoder);
    let method = match decoder {
        None => "pq",
        Some(_) => "pq+decoder",
    };
    bench_with(
        set,
        &queries,
        &db,
        method,
        bytes,
        overhead,
        DEFAULT_RANK_TRIPLES,
        seed,
    )
}

/// Both sides compressed: queries are quantized and reconstructed with
/// the same pipeline before searching.
pub fn symmetric_bench(
    set: &DescriptorSet,
    noise_sigma: f64,
    cb: &Codebook,
    decoder: Option<&DecoderWeights>,
    seed: u64,
) -> Result<BenchResult> {
    let queries = noisy_queries(set.data(), noise_sigma, seed)?;
    let queries = compress_rows(&queries, cb, decoder)?;
    let db = compress_rows(set.data(), cb, decoder)?;
    let bytes = code_bits(cb.m(), cb.k())? as f64 / 8.0;
    let overhead = pipeline_overhead(cb, decoder);
    let method = match decoder {
        None => "pq-sym",
        Some(_) => "pq+decoder-sym",
    };
    bench_with(
        set,
        &queries,
        &db,
        method,
        bytes,
        overhead,
        DEFAULT_RANK_TRIPLES,
        seed,
    )
}

/// Bytes a deployment ships once, independent of database size.
pub fn pipeline_overhead(cb: &Codebook, decoder: Option<&DecoderWeights>) -> u64 {
    let mut total = cb.to_bytes().len() as u64;
    if let Some(w) = decoder {
        total += w.to_bytes().len() as u64;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::fit_codebook;
    use crate::store::synth_descriptors;

    fn line_db(points: &[f64]) -> Matrix {
        Matrix::new(points.len(), 1, points.to_vec()).unwrap()
    }

    #[test]
    fn recall_hand_case() {
        let db = line_db(&[0.0, 1.0, 10.0]);
        let queries = line_db(&[0.1, 9.5]);
        let r1 = recall_at_k(&queries, &db, &[0, 2], 1).unwrap();
        assert_eq!(r1, 1.0);
        // A query at 1.4 whose truth is row 0 misses at k=1, hits at k=2.
        let q2 = line_db(&[1.4]);
        assert_eq!(recall_at_k(&q2, &db, &[0], 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&q2, &db, &[0], 2).unwrap(), 1.0);
    }

    #[test]
    fn recall_ties_break_to_lowest_row() {
        let db = line_db(&[5.0, 5.0, 5.0]);
        let q = line_db(&[5.0]);
        assert_eq!(recall_at_k(&q, &db, &[0], 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&q, &db, &[1], 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&q, &db, &[1], 2).unwrap(), 1.0);
    }

    #[test]
    fn recall_against_random_truth_is_chance_level() {
        let mut rng = Rng::seeded(3);
        let db = Matrix::from_raw(50, 4, (0..200).map(|_| rng.normal()).collect());
        let queries = Matrix::from_raw(400, 4, (0..1600).map(|_| rng.normal()).collect());
        let gt: Vec<usize> = (0..400).map(|_| rng.range(50) as usize).collect();
        let r = recall_at_k(&queries, &db, &gt, 1).unwrap();
        // Expectation 1/50 = 0.02; allow 3 binomial sigmas.
        let sigma = (0.02 * 0.98 / 400.0_f64).sqrt();
        assert!((r - 0.02).abs() <= 3.0 * sigma, "recall {r}");
    }

    #[test]
    fn recall_validates_inputs() {
        let db = line_db(&[0.0, 1.0]);
        let q = line_db(&[0.5]);
        assert!(recall_at_k(&q, &db, &[2], 1).is_err()); // truth out of range
        assert!(recall_at_k(&q, &db, &[0, 1], 1).is_err()); // label count
        assert!(recall_at_k(&q, &db, &[0], 0).is_err()); // k = 0
    }

    #[test]
    fn reconstruction_error_hand_case() {
        let a = line_db(&[0.0, 0.0, 0.0]);
        let b = line_db(&[1.0, 2.0, 6.0]);
        let (mean, median) = reconstruction_errors(&a, &b).unwrap();
        assert_eq!(mean, 3.0);
        assert_eq!(median, 2.0);
    }

    #[test]
    fn ranking_of_identical_data_is_fully_preserved() {
        let mut rng = Rng::seeded(5);
        let rows = Matrix::from_raw(20, 3, (0..60).map(|_| rng.normal()).collect());
        let rp = ranking_preservation(&rows, &rows, 500, 1).unwrap();
        assert_eq!(rp, 1.0);
    }

    #[test]
    fn ranking_of_random_compression_is_chance_level() {
        let mut rng = Rng::seeded(6);
        let rows = Matrix::from_raw(40, 3, (0..120).map(|_| rng.normal()).collect());
        // Completely unrelated "compressed" representation.
        let rows_c = Matrix::from_raw(40, 3, (0..120).map(|_| rng.normal()).collect());
        let n = 10_000;
        let rp = ranking_preservation(&rows, &rows_c, n, 2).unwrap();
        let sigma = (0.25 / n as f64).sqrt();
        assert!((rp - 0.5).abs() <= 3.0 * sigma, "rp {rp}");
    }

    #[test]
    fn ranking_ties_count_as_preserved() {
        // Collapsing every row to one point turns every compressed
        // comparison into a tie — and ties are preserved by contract.
        let rows = line_db(&[0.0, 1.0, 3.0, 7.0]);
        let collapsed = line_db(&[5.0, 5.0, 5.0, 5.0]);
        assert_eq!(ranking_preservation(&rows, &collapsed, 300, 3).unwrap(), 1.0);
        // The rule is symmetric: a tied original never penalizes a
        // decisive compression either.
        assert_eq!(ranking_preservation(&collapsed, &rows, 300, 3).unwrap(), 1.0);
    }

    #[test]
    fn ranking_strict_reversal_scores_zero() {
        // Swapping rows 1 and 2 reverses every distance comparison on
        // this line (all gaps distinct), so nothing is preserved.
        let rows = line_db(&[0.0, 1.0, 3.0]);
        let swapped = line_db(&[0.0, 3.0, 1.0]);
        assert_eq!(ranking_preservation(&rows, &swapped, 300, 4).unwrap(), 0.0);
    }

    #[test]
    fn noisy_queries_deterministic_and_sigma_zero_identity() {
        let data = line_db(&[1.0, 2.0, 3.0]);
        let a = noisy_queries(&data, 0.1, 9).unwrap();
        let b = noisy_queries(&data, 0.1, 9).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), data.data());
        let c = noisy_queries(&data, 0.0, 9).unwrap();
        assert_eq!(c.data(), data.data());
        assert!(noisy_queries(&data, -0.1, 9).is_err());
    }

    #[test]
    fn lossless_codebook_restores_raw_quality() {
        // k = n distinct rows: quantization is lossless on the database,
        // so the asymmetric run must match the raw ceiling exactly.
        let set = synth_descriptors(4, 4, 8, 0.3, 11).unwrap();
        let cb = fit_codebook(&set, 2, 16, 30, 1).unwrap();
        let raw = raw_bench(&set, 0.05, 2).unwrap();
        let asym = asymmetric_bench(&set, 0.05, &cb, None, 2).unwrap();
        assert!(asym.recon_mean < 1e-9, "recon {}", asym.recon_mean);
        assert_eq!(asym.recall1, raw.recall1);
        assert_eq!(asym.recall5, raw.recall5);
        // With clean queries the symmetric run quantizes each query to
        // itself, so it coincides with the asymmetric run.
        let asym_clean = asymmetric_bench(&set, 0.0, &cb, None, 2).unwrap();
        let sym_clean = symmetric_bench(&set, 0.0, &cb, None, 2).unwrap();
        assert_eq!(sym_clean.recall1, asym_clean.recall1);
        assert_eq!(sym_clean.recall5, asym_clean.recall5);
    }

    #[test]
    fn identity_decoder_changes_nothing_on_positive_data() {
        // Descriptors in the positive orthant pass an identity MLP
        // unchanged (relu is transparent), so metrics must agree.
        let mut rng = Rng::seeded(13);
        let data = Matrix::from_raw(32, 4, (0..128).map(|_| rng.uniform(0.1, 1.0)).collect());
        let set = DescriptorSet::new(data, (0..32).collect(), false).unwrap();
        let cb = fit_codebook(&set, 2, 4, 25, 3).unwrap();
        let eye = |n: usize| {
            let mut m = Matrix::zeros(n, n);
            for i in 0..n {
                m.set(i, i, 1.0);
            }
            m
        };
        let w = DecoderWeights::from_matrices(eye(4), eye(4)).unwrap();
        let plain = asymmetric_bench(&set, 0.02, &cb, None, 4).unwrap();
        let decoded = asymmetric_bench(&set, 0.02, &cb, Some(&w), 4).unwrap();
        assert_eq!(plain.recall1, decoded.recall1);
        assert_eq!(plain.recon_mean, decoded.recon_mean);
        assert!(decoded.overhead_bytes > plain.overhead_bytes);
        assert_eq!(plain.method, "pq");
        assert_eq!(decoded.method, "pq+decoder");
    }

    #[test]
    fn bytes_per_vector_reflects_code_size() {
        let set = synth_descriptors(4, 8, 8, 0.2, 17).unwrap();
        let cb = fit_codebook(&set, 4, 16, 20, 5).unwrap();
        let b = asymmetric_bench(&set, 0.05, &cb, None, 6).unwrap();
        // 4 subspaces × 4 bits = 16 bits = 2 bytes per vector.
        assert_eq!(b.bytes_per_vector, 2.0);
        let raw = raw_bench(&set, 0.05, 6).unwrap();
        assert_eq!(raw.bytes_per_vector, 32.0); // 8 dims × 4 bytes
        assert_eq!(raw.overhead_bytes, 0);
        assert!(raw.recon_mean == 0.0 && raw.ranking_preservation == 1.0);
    }
}
