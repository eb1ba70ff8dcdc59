//! Product-quantization codebooks: k-means fitting, hard encode/decode,
//! packed code storage, and the `.cbk` / `.qix` file formats.
//!
//! A codebook splits a D-dimensional descriptor into `m` sub-vectors of
//! `sub_dim = D / m` values and quantizes each against its own `k`-entry
//! centroid table. Hard codes are the argmin over squared sub-vector
//! distances, ties broken toward the lowest index. The same distance and
//! argmin helpers back the differentiable encoder, so both paths always
//! agree bit for bit.

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use std::collections::HashSet;

use crate::binfmt::{Reader, Writer};
use crate::error::{DpqError, Result};
use crate::numerics::{derive_seed, squared_dist, Matrix, Rng};
use crate::store::DescriptorSet;

const CBK_MAGIC: &[u8; 4] = b"DPQC";
const CBK_VERSION: u32 = 1;
const QIX_MAGIC: &[u8; 4] = b"DPQI";
const QIX_VERSION: u32 = 1;

/// Result of one k-means run.
#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub centroids: Matrix,
    pub assignments: Vec<u32>,
    /// Sum of squared distances from each point to its assigned centroid.
    pub distortion: f64,
}

/// First index with the strictly smallest value. Ties keep the earlier
/// index, which is the tie-break rule everywhere in this crate.
pub(crate) fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = values[0];
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

fn distinct_row_count(points: &Matrix) -> usize {
    let mut seen: HashSet<Vec<u64>> = HashSet::with_capacity(points.rows());
    for i in 0..points.rows() {
        seen.insert(points.row(i).iter().map(|v| v.to_bits()).collect());
    }
    seen.len()
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Empty clusters are re-seeded to the point currently farthest from its
/// assigned centroid. Distortion is measured after every assignment phase
/// and checked to be non-increasing. With fewer distinct points than `k`,
/// fitting fails unless `allow_duplicates` permits repeated centroids.
pub fn kmeans(
    points: &Matrix,
    k: usize,
    iters: usize,
    seed: u64,
    allow_duplicates: bool,
) -> Result<KmeansResult> {
    let n = points.rows();
    let d = points.cols();
    if n == 0 || d == 0 {
        return Err(DpqError::Input("kmeans needs a non-empty point set".into()));
    }
    if k == 0 || k > n {
        return Err(DpqError::Input(format!(
            "kmeans needs 1 <= k <= n, got k={k} for n={n}"
        )));
    }
    if !allow_duplicates {
        let distinct = distinct_row_count(points);
        if distinct < k {
            return Err(DpqError::Input(format!(
                "only {distinct} distinct points for k={k}; enable allow_duplicates to fit anyway"
            )));
        }
    }

    let mut rng = Rng::seeded(seed);

    // k-means++ seeding: first centroid uniform, the rest sampled with
    // probability proportional to squared distance from the chosen set.
    let mut centroids = Matrix::zeros(k, d);
    let first = rng.range(n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_dist(points.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.f64() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All remaining points coincide with chosen centroids.
            rng.range(n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for i in 0..n {
            let nd = squared_dist(points.row(i), centroids.row(c));
            if nd < d2[i] {
                d2[i] = nd;
            }
        }
    }

    let assign = |centroids: &Matrix, assignments: &mut Vec<u32>| -> f64 {
        let mut distortion = 0.0;
        for i in 0..n {
            let p = points.row(i);
            let mut best = 0usize;
            let mut best_d = squared_dist(p, centroids.row(0));
            for c in 1..k {
                let dd = squared_dist(p, centroids.row(c));
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            assignments[i] = best as u32;
            distortion += best_d;
        }
        distortion
    };

    let mut assignments = vec![0u32; n];
    let mut prev_distortion = f64::INFINITY;
    for _ in 0..iters {
        let distortion = assign(&centroids, &mut assignments);
        if distortion > prev_distortion + 1e-9 * prev_distortion.max(1.0) {
            return Err(DpqError::Numeric(format!(
                "kmeans distortion increased: {prev_distortion} -> {distortion}"
            )));
        }
        prev_distortion = distortion;

        // Mean update with f64 accumulators.
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i] as usize;
            counts[c] += 1;
            for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *dst = s * inv;
                }
            }
        }

        // Re-seed empty clusters to the point farthest from its centroid.
        let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empties.is_empty() {
            let mut cur_d2: Vec<f64> = (0..n)
                .map(|i| squared_dist(points.row(i), centroids.row(assignments[i] as usize)))
                .collect();
            for c in empties {
                let mut far = 0usize;
                for i in 1..n {
                    if cur_d2[i] > cur_d2[far] {
                        far = i;
                    }
                }
                centroids.row_mut(c).copy_from_slice(points.row(far));
                cur_d2[far] = 0.0;
            }
        }
    }
    let distortion = assign(&centroids, &mut assignments);
    if distortion > prev_distortion + 1e-9 * prev_distortion.max(1.0) {
        return Err(DpqError::Numeric(format!(
            "kmeans distortion increased on final assignment: {prev_distortion} -> {distortion}"
        )));
    }

    Ok(KmeansResult {
        centroids,
        assignments,
        distortion,
    })
}

/// Per-subspace centroid tables. Stored as an (m·k) × sub_dim matrix with
/// subspace `s` occupying rows `s·k .. (s+1)·k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    m: usize,
    k: usize,
    sub_dim: usize,
    centroids: Matrix,
}

impl Codebook {
    pub fn new(m: usize, k: usize, sub_dim: usize, centroids: Matrix) -> Result<Codebook> {
        if m == 0 || k == 0 || sub_dim == 0 {
            return Err(DpqError::Config(format!(
                "codebook dimensions must be positive, got m={m}, k={k}, sub_dim={sub_dim}"
            )));
        }
        if centroids.rows() != m * k || centroids.cols() != sub_dim {
            return Err(DpqError::Dimension(format!(
                "centroid table is {}x{}, want {}x{}",
                centroids.rows(),
                centroids.cols(),
                m * k,
                sub_dim
            )));
        }
        if !centroids.all_finite() {
            return Err(DpqError::Numeric("codebook has non-finite centroids".into()));
        }
        Ok(Codebook {
            m,
            k,
            sub_dim,
            centroids,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }

    /// Full descriptor dimensionality this codebook quantizes.
    pub fn dim(&self) -> usize {
        self.m * self.sub_dim
    }

    pub fn centroid(&self, subspace: usize, index: usize) -> &[f64] {
        self.centroids.row(subspace * self.k + index)
    }

    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    pub(crate) fn centroids_mut(&mut self) -> &mut Matrix {
        &mut self.centroids
    }

    /// Squared distances from one sub-vector to all k centroids of a
    /// subspace. Shared by hard encoding and the differentiable encoder.
    pub(crate) fn sq_dists(&self, subspace: usize, sub: &[f64], out: &mut [f64]) {
        debug_assert_eq!(sub.len(), self.sub_dim);
        debug_assert_eq!(out.len(), self.k);
        for (i, o) in out.iter_mut().enumerate() {
            *o = squared_dist(sub, self.centroid(subspace, i));
        }
    }

    /// SHA-256 of the serialized (f32) representation. Quantized indices
    /// store this to pin which codebook produced them.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.to_bytes());
        hasher.finalize().into()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.magic(CBK_MAGIC)
            .u32(CBK_VERSION)
            .u32(self.m as u32)
            .u32(self.k as u32)
            .u32(self.sub_dim as u32)
            .f32_slice(self.centroids.data());
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Codebook> {
        let mut r = Reader::new(bytes);
        r.expect_magic(CBK_MAGIC)?;
        let version = r.read_u32("version")?;
        if version != CBK_VERSION {
            return Err(DpqError::Format {
                offset: 4,
                what: format!("unsupported codebook version {version}"),
            });
        }
        let m = r.read_u32("m")? as usize;
        let k = r.read_u32("k")? as usize;
        let sub_dim = r.read_u32("sub_dim")? as usize;
        let values = r.read_f32_vec(m * k * sub_dim, "centroid payload")?;
        r.expect_end()?;
        Codebook::new(m, k, sub_dim, Matrix::new(m * k, sub_dim, values)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Codebook> {
        Codebook::from_bytes(&std::fs::read(path)?)
    }
}

/// Fit one codebook per subspace with k-means on the sub-vector columns.
/// Duplicate centroids are tolerated (degenerate data still fits).
pub fn fit_codebook(
    set: &DescriptorSet,
    m: usize,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<Codebook> {
    let d = set.dim();
    if m == 0 || d % m != 0 {
        return Err(DpqError::Dimension(format!(
            "dim {d} is not divisible into {m} subspaces"
        )));
    }
    if k > set.n() {
        return Err(DpqError::Input(format!(
            "k={k} exceeds the {} available points",
            set.n()
        )));
    }
    let sub_dim = d / m;
    let mut centroids = Matrix::zeros(m * k, sub_dim);
    for s in 0..m {
        let sub = set.data().column_slice(s * sub_dim, (s + 1) * sub_dim)?;
        let fit = kmeans(
            &sub,
            k,
            iters,
            derive_seed(seed, &format!("fit_codebook.{s}")),
            true,
        )?;
        for i in 0..k {
            centroids
                .row_mut(s * k + i)
                .copy_from_slice(fit.centroids.row(i));
        }
    }
    Codebook::new(m, k, sub_dim, centroids)
}

/// Bits per stored vector: m · log2(k). `k` must be a power of two so codes
/// pack exactly.
pub fn code_bits(m: usize, k: usize) -> Result<usize> {
    if m == 0 || k == 0 {
        return Err(DpqError::Config(format!(
            "code_bits needs positive m and k, got m={m}, k={k}"
        )));
    }
    if !k.is_power_of_two() {
        return Err(DpqError::Config(format!(
            "k must be a power of two to pack codes, got {k}"
        )));
    }
    Ok(m * (k.trailing_zeros() as usize))
}

/// Hard code table for a descriptor set, pinned to its codebook by hash.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedIndex {
    n: usize,
    m: usize,
    k: usize,
    codes: Vec<u32>, // n * m, row-major
    codebook_ref: [u8; 32],
}

impl QuantizedIndex {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn code(&self, row: usize, subspace: usize) -> u32 {
        self.codes[row * self.m + subspace]
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn codebook_ref(&self) -> &[u8; 32] {
        &self.codebook_ref
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bits_per_code = code_bits(1, self.k)?;
        let row_bytes = (self.m * bits_per_code + 7) / 8;
        let mut w = Writer::new();
        w.magic(QIX_MAGIC)
            .u32(QIX_VERSION)
            .u64(self.n as u64)
            .u32(self.m as u32)
            .u32(self.k as u32)
            .bytes(&self.codebook_ref);
        let mut row = vec![0u8; row_bytes];
        for i in 0..self.n {
            row.iter_mut().for_each(|b| *b = 0);
            for (j, &code) in self.codes[i * self.m..(i + 1) * self.m].iter().enumerate() {
                // LSB-first bit packing within each byte-aligned row.
                let base = j * bits_per_code;
                for b in 0..bits_per_code {
                    if code >> b & 1 == 1 {
                        let pos = base + b;
                        row[pos / 8] |= 1 << (pos % 8);
                    }
                }
            }
            w.bytes(&row);
        }
        Ok(w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<QuantizedIndex> {
        let mut r = Reader::new(bytes);
        r.expect_magic(QIX_MAGIC)?;
        let version = r.read_u32("version")?;
        if version != QIX_VERSION {
            return Err(DpqError::Format {
                offset: 4,
                what: format!("unsupported index version {version}"),
            });
        }
        let n = r.read_u64("count")? as usize;
        let m = r.read_u32("m")? as usize;
        let k = r.read_u32("k")? as usize;
        let mut codebook_ref = [0u8; 32];
        codebook_ref.copy_from_slice(r.read_bytes(32, "codebook hash")?);
        if n == 0 || m == 0 {
            return Err(DpqError::Format {
                offset: 8,
                what: format!("empty index ({n} rows, {m} subspaces)"),
            });
        }
        let bits_per_code = code_bits(1, k)?;
        let row_bytes = (m * bits_per_code + 7) / 8;
        let mut codes = Vec::with_capacity(n * m);
        for _ in 0..n {
            let row_at = r.position();
            let row = r.read_bytes(row_bytes, "code row")?;
            for j in 0..m {
                let base = j * bits_per_code;
                let mut code = 0u32;
                for b in 0..bits_per_code {
                    let pos = base + b;
                    if row[pos / 8] >> (pos % 8) & 1 == 1 {
                        code |= 1 << b;
                    }
                }
                codes.push(code);
            }
            // Padding bits beyond m * bits_per_code must be zero.
            for pos in m * bits_per_code..row_bytes * 8 {
                if row[pos / 8] >> (pos % 8) & 1 == 1 {
                    return Err(DpqError::Format {
                        offset: row_at + pos / 8,
                        what: "nonzero padding bits in code row".into(),
                    });
                }
            }
        }
        r.expect_end()?;
        Ok(QuantizedIndex {
            n,
            m,
            k,
            codes,
            codebook_ref,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<QuantizedIndex> {
        QuantizedIndex::from_bytes(&std::fs::read(path)?)
    }
}

/// Hard-quantize every row: per subspace, the index of the nearest centroid
/// by squared distance, ties to the lowest index.
pub fn pq_encode(data: &Matrix, cb: &Codebook) -> Result<QuantizedIndex> {
    if data.cols() != cb.dim() {
        return Err(DpqError::Dimension(format!(
            "descriptors have dim {}, codebook expects {}",
            data.cols(),
            cb.dim()
        )));
    }
    if data.rows() == 0 {
        return Err(DpqError::Input("cannot encode an empty set".into()));
    }
    let n = data.rows();
    let m = cb.m();
    let sd = cb.sub_dim();
    let mut codes = vec![0u32; n * m];
    codes
        .par_chunks_mut(m)
        .enumerate()
        .for_each(|(i, row_codes)| {
            let row = data.row(i);
            let mut dists = vec![0.0f64; cb.k()];
            for s in 0..m {
                cb.sq_dists(s, &row[s * sd..(s + 1) * sd], &mut dists);
                row_codes[s] = argmin(&dists) as u32;
            }
        });
    Ok(QuantizedIndex {
        n,
        m,
        k: cb.k(),
        codes,
        codebook_ref: cb.content_hash(),
    })
}

/// Reconstruct descriptors by concatenating the referenced centroids.
/// Fails if the index was built against a different codebook.
pub fn pq_decode(cb: &Codebook, qi: &QuantizedIndex) -> Result<Matrix> {
    if qi.m != cb.m() || qi.k != cb.k() {
        return Err(DpqError::Dimension(format!(
            "index is m={}, k={}; codebook is m={}, k={}",
            qi.m,
            qi.k,
            cb.m(),
            cb.k()
        )));
    }
    if qi.codebook_ref != cb.content_hash() {
        return Err(DpqError::Integrity(
            "quantized index was built against a different codebook".into(),
        ));
    }
    let sd = cb.sub_dim();
    let mut out = Matrix::zeros(qi.n, cb.dim());
    for i in 0..qi.n {
        let row = out.row_mut(i);
        for s in 0..qi.m {
            let code = qi.codes[i * qi.m + s] as usize;
            if code >= cb.k() {
                return Err(DpqError::Integrity(format!(
                    "code {code} out of range for k={}",
                    cb.k()
                )));
            }
            row[s * sd..(s + 1) * sd].copy_from_slice(cb.centroid(s, code));
        }
    }
    Ok(out)
}
