//! Straight-through differentiable quantization layer.
//!
//! Forward, per subspace: compute distances from the sub-vector to every
//! centroid, softmax the negated distances (scaled by temperature tau) into
//! soft assignment weights, take the hard argmin code, and emit the hard
//! centroid as the output value. Backward routes gradients through the soft
//! assignment instead: output ≈ Σ_j a_j·c_j with a = softmax(−d/τ), which
//! makes both the centroids and the input differentiable while inference
//! stays exactly hard PQ. The forward value is produced by the same distance
//! and argmin helpers as `pq_encode`/`pq_decode`, so the two paths agree bit
//! for bit.

use crate::codebook::{argmin, Codebook};
use crate::error::{DpqError, Result};
use crate::numerics::{dot, Matrix};

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct EncoderForward {
    /// Softmax assignment weights, row (i·m + s) holds the k weights of
    /// row i, subspace s.
    soft_weights: Matrix,
    /// True (non-squared) sub-vector distances, same layout as the weights.
    dists: Matrix,
    /// Hard codes, n·m row-major.
    hard_codes: Vec<u32>,
    /// Hard reconstruction: bitwise equal to decode(encode(input)).
    output: Matrix,
    tau: f64,
}

impl EncoderForward {
    pub fn soft_weights(&self) -> &Matrix {
        &self.soft_weights
    }

    pub fn dists(&self) -> &Matrix {
        &self.dists
    }

    pub fn hard_codes(&self) -> &[u32] {
        &self.hard_codes
    }

    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

/// Gradients of a scalar loss with respect to the encoder's inputs.
#[derive(Debug, Clone)]
pub struct EncoderBackward {
    /// Same layout as `Codebook::centroids`: (m·k) × sub_dim.
    pub grad_centroids: Matrix,
    /// n × dim gradient with respect to the input descriptors.
    pub grad_input: Matrix,
}

fn validate_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(DpqError::Config(format!(
            "temperature tau must be positive and finite, got {tau}"
        )));
    }
    Ok(())
}

fn validate_shapes(data: &Matrix, cb: &Codebook) -> Result<()> {
    if data.cols() != cb.dim() {
        return Err(DpqError::Dimension(format!(
            "input dim {} does not match codebook dim {}",
            data.cols(),
            cb.dim()
        )));
    }
    if data.rows() == 0 {
        return Err(DpqError::Input("cannot encode an empty batch".into()));
    }
    Ok(())
}

/// Numerically stable softmax of −d/τ, written into `weights`.
fn soft_assign(dists: &[f64], tau: f64, weights: &mut [f64]) {
    let mut zmax = f64::NEG_INFINITY;
    for &d in dists {
        let z = -d / tau;
        if z > zmax {
            zmax = z;
        }
    }
    let mut total = 0.0;
    for (w, &d) in weights.iter_mut().zip(dists) {
        let e = ((-d / tau) - zmax).exp();
        *w = e;
        total += e;
    }
    for w in weights.iter_mut() {
        *w /= total;
    }
}

/// Run the straight-through forward pass over a batch.
pub fn encode_forward(data: &Matrix, cb: &Codebook, tau: f64) -> Result<EncoderForward> {
    validate_tau(tau)?;
    validate_shapes(data, cb)?;
    let n = data.rows();
    let m = cb.m();
    let k = cb.k();
    let sd = cb.sub_dim();

    let mut soft_weights = Matrix::zeros(n * m, k);
    let mut dists = Matrix::zeros(n * m, k);
    let mut hard_codes = vec![0u32; n * m];
    let mut output = Matrix::zeros(n, cb.dim());
    let mut d2 = vec![0.0f64; k];

    for i in 0..n {
        let row = data.row(i);
        for s in 0..m {
            let sub = &row[s * sd..(s + 1) * sd];
            cb.sq_dists(s, sub, &mut d2);
            let hard = argmin(&d2);
            hard_codes[i * m + s] = hard as u32;

            let drow = dists.row_mut(i * m + s);
            for (dst, &v) in drow.iter_mut().zip(&d2) {
                *dst = v.sqrt();
            }
            let drow = dists.row(i * m + s);
            soft_assign(drow, tau, soft_weights.row_mut(i * m + s));

            // Forward value is the hard centroid, copied verbatim.
            output.row_mut(i)[s * sd..(s + 1) * sd].copy_from_slice(cb.centroid(s, hard));
        }
    }

    Ok(EncoderForward {
        soft_weights,
        dists,
        hard_codes,
        output,
        tau,
    })
}

/// The soft reconstruction Σ_j a_j·c_j that carries gradients. This is what
/// finite differences of the encoder must be taken against.
pub fn soft_reconstruct(data: &Matrix, cb: &Codebook, tau: f64) -> Result<Matrix> {
    validate_tau(tau)?;
    validate_shapes(data, cb)?;
    let n = data.rows();
    let m = cb.m();
    let k = cb.k();
    let sd = cb.sub_dim();
    let mut out = Matrix::zeros(n, cb.dim());
    let mut d2 = vec![0.0f64; k];
    let mut d = vec![0.0f64; k];
    let mut w = vec![0.0f64; k];
    for i in 0..n {
        let row = data.row(i);
        for s in 0..m {
            let sub = &row[s * sd..(s + 1) * sd];
            cb.sq_dists(s, sub, &mut d2);
            for (a, &b) in d.iter_mut().zip(&d2) {
                *a = b.sqrt();
            }
            soft_assign(&d, tau, &mut w);
            let seg = &mut out.row_mut(i)[s * sd..(s + 1) * sd];
            for (j, &wj) in w.iter().enumerate() {
                let c = cb.centroid(s, j);
                for (o, &cv) in seg.iter_mut().zip(c) {
                    *o += wj * cv;
                }
            }
        }
    }
    Ok(out)
}

/// Distances below this are treated as exactly zero for the 1/d terms;
/// the distance function is not differentiable there and the subgradient
/// zero is used.
const ZERO_DIST: f64 = 1e-300;

/// Backward pass: pushes `grad_output` through the soft assignment path.
///
/// Both gradient contributions are included: the linear combination term
/// (a_j per centroid) and the softmax-through-distance term, which touches
/// every centroid of the subspace and the input sub-vector.
pub fn encode_backward(
    fwd: &EncoderForward,
    data: &Matrix,
    cb: &Codebook,
    grad_output: &Matrix,
) -> Result<EncoderBackward> {
    validate_shapes(data, cb)?;
    let n = data.rows();
    let m = cb.m();
    let k = cb.k();
    let sd = cb.sub_dim();
    if fwd.output.rows() != n || fwd.soft_weights.rows() != n * m || fwd.soft_weights.cols() != k {
        return Err(DpqError::Dimension(
            "forward cache does not match this batch/codebook".into(),
        ));
    }
    if grad_output.rows() != n || grad_output.cols() != cb.dim() {
        return Err(DpqError::Dimension(format!(
            "grad_output is {}x{}, want {}x{}",
            grad_output.rows(),
            grad_output.cols(),
            n,
            cb.dim()
        )));
    }

    let mut grad_centroids = Matrix::zeros(m * k, sd);
    let mut grad_input = Matrix::zeros(n, cb.dim());
    let mut s_vals = vec![0.0f64; k];

    for i in 0..n {
        let row = data.row(i);
        for s in 0..m {
            let g = &grad_output.row(i)[s * sd..(s + 1) * sd];
            let sub = &row[s * sd..(s + 1) * sd];
            let a = fwd.soft_weights.row(i * m + s);
            let d = fwd.dists.row(i * m + s);

            // s_j = g · c_j, and their a-weighted mean.
            let mut sbar = 0.0;
            for j in 0..k {
                let sj = dot(g, cb.centroid(s, j));
                s_vals[j] = sj;
                sbar += a[j] * sj;
            }

            let gx = &mut grad_input.row_mut(i)[s * sd..(s + 1) * sd];
            for j in 0..k {
                let c = cb.centroid(s, j);
                let gc = grad_centroids.row_mut(s * k + j);
                // Linear-combination term: a_j · g.
                for (dst, &gv) in gc.iter_mut().zip(g) {
                    *dst += a[j] * gv;
                }
                // Softmax-through-distance term. d(a)/d(z_j) with
                // z = −d/τ gives t_j = a_j (s_j − s̄); dL/dd_j = −t_j/τ.
                if d[j] > ZERO_DIST {
                    let t = a[j] * (s_vals[j] - sbar);
                    let coef = -t / (fwd.tau * d[j]);
                    // ∂d_j/∂c_j = (c_j − x)/d_j ; ∂d_j/∂x = (x − c_j)/d_j.
                    for ((dst, &cv), (&xv, gxv)) in
                        gc.iter_mut().zip(c).zip(sub.iter().zip(gx.iter_mut()))
                    {
                        let diff = cv - xv;
                        *dst += coef * diff;
                        *gxv -= coef * diff;
                    }
                }
            }
        }
    }

    Ok(EncoderBackward {
        grad_centroids,
        grad_input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{fit_codebook, pq_decode, pq_encode};
    use crate::numerics::{finite_diff_check, Rng};
    use crate::store::synth_descriptors;

    fn random_codebook(m: usize, k: usize, sd: usize, seed: u64) -> Codebook {
        let mut rng = Rng::seeded(seed);
        let data: Vec<f64> = (0..m * k * sd).map(|_| rng.normal()).collect();
        Codebook::new(m, k, sd, Matrix::new(m * k, sd, data).unwrap()).unwrap()
    }

    fn random_batch(n: usize, dim: usize, seed: u64) -> Matrix {
        let mut rng = Rng::seeded(seed);
        Matrix::new(n, dim, (0..n * dim).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn forward_is_bitwise_hard_pq() {
        let set = synth_descriptors(6, 30, 16, 0.15, 31).unwrap();
        let cb = fit_codebook(&set, 4, 8, 15, 5).unwrap();
        let fwd = encode_forward(set.data(), &cb, 0.05).unwrap();
        let qi = pq_encode(set.data(), &cb).unwrap();
        let hard = pq_decode(&cb, &qi).unwrap();
        assert_eq!(fwd.hard_codes(), qi.codes());
        let a: Vec<u64> = fwd.output().data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = hard.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn soft_weights_are_a_distribution() {
        let cb = random_codebook(2, 5, 3, 1);
        let batch = random_batch(7, 6, 2);
        let fwd = encode_forward(&batch, &cb, 0.5).unwrap();
        for r in 0..fwd.soft_weights().rows() {
            let row = fwd.soft_weights().row(r);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
            for &w in row {
                assert!((0.0..=1.0).contains(&w));
            }
        }
    }

    #[test]
    fn tiny_tau_concentrates_on_hard_code() {
        let cb = random_codebook(1, 6, 4, 3);
        let batch = random_batch(5, 4, 4);
        let fwd = encode_forward(&batch, &cb, 1e-3).unwrap();
        for r in 0..5 {
            let hard = fwd.hard_codes()[r] as usize;
            let w = fwd.soft_weights().row(r)[hard];
            assert!(w > 1.0 - 1e-6, "row {r}: weight at hard code is {w}");
        }
    }

    #[test]
    fn single_centroid_backward_passes_gradient_through() {
        // k=1: constant softmax weight 1, so grad_centroid == grad_output
        // and grad_input == 0.
        let cb = random_codebook(1, 1, 3, 5);
        let batch = random_batch(2, 3, 6);
        let fwd = encode_forward(&batch, &cb, 0.05).unwrap();
        let g = random_batch(2, 3, 7);
        let back = encode_backward(&fwd, &batch, &cb, &g).unwrap();
        let want: Vec<f64> = (0..3).map(|j| g.get(0, j) + g.get(1, j)).collect();
        for j in 0..3 {
            assert!((back.grad_centroids.get(0, j) - want[j]).abs() < 1e-15);
        }
        assert!(back.grad_input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_grad_output_gives_zero_grads() {
        let cb = random_codebook(2, 4, 3, 8);
        let batch = random_batch(3, 6, 9);
        let fwd = encode_forward(&batch, &cb, 0.3).unwrap();
        let back = encode_backward(&fwd, &batch, &cb, &Matrix::zeros(3, 6)).unwrap();
        assert!(back.grad_centroids.data().iter().all(|&v| v == 0.0));
        assert!(back.grad_input.data().iter().all(|&v| v == 0.0));
    }

    /// Scalar probe loss L = Σ w ⊙ soft_reconstruct for gradient checking.
    fn probe_loss(batch: &Matrix, cb: &Codebook, tau: f64, w: &Matrix) -> f64 {
        let soft = soft_reconstruct(batch, cb, tau).unwrap();
        dot(soft.data(), w.data())
    }

    #[test]
    fn centroid_gradients_match_finite_differences() {
        for seed in 0..6u64 {
            let m = 2;
            let k = 3 + (seed as usize % 3);
            let sd = 2 + (seed as usize % 2);
            let cb = random_codebook(m, k, sd, 100 + seed);
            let batch = random_batch(4, m * sd, 200 + seed);
            let tau = 0.3 + 0.2 * (seed as f64 % 4.0);
            let w = random_batch(4, m * sd, 300 + seed);

            let fwd = encode_forward(&batch, &cb, tau).unwrap();
            let back = encode_backward(&fwd, &batch, &cb, &w).unwrap();

            let x0 = cb.centroids().data().to_vec();
            let err = finite_diff_check(
                |c| {
                    let cbp = Codebook::new(
                        m,
                        k,
                        sd,
                        Matrix::new(m * k, sd, c.to_vec()).unwrap(),
                    )
                    .unwrap();
                    probe_loss(&batch, &cbp, tau, &w)
                },
                &x0,
                back.grad_centroids.data(),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        for seed in 0..6u64 {
            let cb = random_codebook(2, 4, 3, 400 + seed);
            let batch = random_batch(3, 6, 500 + seed);
            let tau = 0.4 + 0.1 * (seed as f64 % 5.0);
            let w = random_batch(3, 6, 600 + seed);

            let fwd = encode_forward(&batch, &cb, tau).unwrap();
            let back = encode_backward(&fwd, &batch, &cb, &w).unwrap();

            let x0 = batch.data().to_vec();
            let err = finite_diff_check(
                |x| {
                    let b = Matrix::new(3, 6, x.to_vec()).unwrap();
                    probe_loss(&b, &cb, tau, &w)
                },
                &x0,
                back.grad_input.data(),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn low_tau_gradients_match_at_matching_scale() {
        // tau = 0.05 with data whose sub-vector distances are of the same
        // order, so the softmax is active rather than saturated. (In the
        // fully saturated regime the distance-term gradients drop to ~1e-10
        // and sit below what central differences can resolve.)
        let mut cb = random_codebook(1, 4, 3, 900);
        cb.centroids_mut().scale(0.08);
        let mut batch = random_batch(2, 3, 901);
        batch.scale(0.08);
        let w = random_batch(2, 3, 902);
        let tau = 0.05;
        let fwd = encode_forward(&batch, &cb, tau).unwrap();
        let back = encode_backward(&fwd, &batch, &cb, &w).unwrap();
        let err = finite_diff_check(
            |c| {
                let cbp =
                    Codebook::new(1, 4, 3, Matrix::new(4, 3, c.to_vec()).unwrap()).unwrap();
                probe_loss(&batch, &cbp, tau, &w)
            },
            &cb.centroids().data().to_vec(),
            back.grad_centroids.data(),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn invalid_tau_rejected() {
        let cb = random_codebook(1, 2, 2, 1);
        let batch = random_batch(1, 2, 2);
        for tau in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(
                encode_forward(&batch, &cb, tau),
                Err(DpqError::Config(_))
            ));
        }
    }

    #[test]
    fn shape_mismatches_rejected() {
        let cb = random_codebook(2, 3, 4, 1);
        let batch = random_batch(2, 6, 2); // dim 6 != 8
        assert!(matches!(
            encode_forward(&batch, &cb, 0.1),
            Err(DpqError::Dimension(_))
        ));
        let good = random_batch(2, 8, 3);
        let fwd = encode_forward(&good, &cb, 0.1).unwrap();
        let bad_grad = Matrix::zeros(2, 6);
        assert!(matches!(
            encode_backward(&fwd, &good, &cb, &bad_grad),
            Err(DpqError::Dimension(_))
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let cb = random_codebook(3, 5, 4, 77);
        let batch = random_batch(6, 12, 78);
        let a = encode_forward(&batch, &cb, 0.05).unwrap();
        let b = encode_forward(&batch, &cb, 0.05).unwrap();
        assert_eq!(a.output().data(), b.output().data());
        assert_eq!(a.soft_weights().data(), b.soft_weights().data());
    }
}
