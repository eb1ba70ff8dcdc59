//! Learned dequantization decoder: a two-layer MLP without biases,
//! out = relu(q · W1) · W2, plus optional low-rank adapters.
//!
//! The adapters follow the W′ = W + B·A factorization: for layer 1,
//! B1 (D×r) · A1 (r×H) is added to W1, and for layer 2, B2 (H×r) · A2 (r×D)
//! is added to W2. A is initialized small and random, B to zero, so a fresh
//! adapter leaves the forward pass bitwise unchanged. Finetuning trains only
//! the factors; base weights stay frozen and can be shared across scenes
//! while each scene stores just its (tiny) delta.

use crate::binfmt::{Reader, Writer};
use crate::error::{DpqError, Result};
use crate::numerics::{derive_seed, Matrix, Rng};

const DEC_MAGIC: &[u8; 4] = b"DPQW";
const DEC_VERSION: u32 = 1;
const DLT_MAGIC: &[u8; 4] = b"DPQL";
const DLT_VERSION: u32 = 1;

/// Low-rank adapter factors for both layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    rank: usize,
    a1: Matrix, // r x h
    b1: Matrix, // d x r
    a2: Matrix, // r x d
    b2: Matrix, // h x r
}

impl LoraFactors {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn a1(&self) -> &Matrix {
        &self.a1
    }

    pub fn b1(&self) -> &Matrix {
        &self.b1
    }

    pub fn a2(&self) -> &Matrix {
        &self.a2
    }

    pub fn b2(&self) -> &Matrix {
        &self.b2
    }

    pub(crate) fn a1_mut(&mut self) -> &mut Matrix {
        &mut self.a1
    }

    pub(crate) fn b1_mut(&mut self) -> &mut Matrix {
        &mut self.b1
    }

    pub(crate) fn a2_mut(&mut self) -> &mut Matrix {
        &mut self.a2
    }

    pub(crate) fn b2_mut(&mut self) -> &mut Matrix {
        &mut self.b2
    }

    /// Total adapter parameter count: 2·r·(d + h).
    pub fn param_count(&self) -> usize {
        self.a1.rows() * self.a1.cols()
            + self.b1.rows() * self.b1.cols()
            + self.a2.rows() * self.a2.cols()
            + self.b2.rows() * self.b2.cols()
    }
}

/// Decoder weights: base matrices plus optional adapter factors.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    d: usize,
    h: usize,
    w1: Matrix, // d x h
    w2: Matrix, // h x d
    lora: Option<LoraFactors>,
}

impl DecoderWeights {
    /// Kaiming-uniform initialization: entries of W1 uniform in
    /// ±1/sqrt(d), entries of W2 uniform in ±1/sqrt(h).
    pub fn init(d: usize, h: usize, seed: u64) -> Result<DecoderWeights> {
        if d == 0 || h == 0 {
            return Err(DpqError::Config(format!(
                "decoder dims must be positive, got d={d}, h={h}"
            )));
        }
        let mut rng1 = Rng::seeded(derive_seed(seed, "decoder.w1"));
        let mut rng2 = Rng::seeded(derive_seed(seed, "decoder.w2"));
        let s1 = 1.0 / (d as f64).sqrt();
        let s2 = 1.0 / (h as f64).sqrt();
        let w1 = Matrix::from_raw(d, h, (0..d * h).map(|_| rng1.uniform(-s1, s1)).collect());
        let w2 = Matrix::from_raw(h, d, (0..h * d).map(|_| rng2.uniform(-s2, s2)).collect());
        Ok(DecoderWeights {
            d,
            h,
            w1,
            w2,
            lora: None,
        })
    }

    pub fn from_matrices(w1: Matrix, w2: Matrix) -> Result<DecoderWeights> {
        let (d, h) = (w1.rows(), w1.cols());
        if d == 0 || h == 0 {
            return Err(DpqError::Config("decoder weights must be non-empty".into()));
        }
        if w2.rows() != h || w2.cols() != d {
            return Err(DpqError::Dimension(format!(
                "w2 is {}x{}, want {}x{}",
                w2.rows(),
                w2.cols(),
                h,
                d
            )));
        }
        if !w1.all_finite() || !w2.all_finite() {
            return Err(DpqError::Numeric("decoder weights must be finite".into()));
        }
        Ok(DecoderWeights {
            d,
            h,
            w1,
            w2,
            lora: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn hidden(&self) -> usize {
        self.h
    }

    pub fn w1(&self) -> &Matrix {
        &self.w1
    }

    pub fn w2(&self) -> &Matrix {
        &self.w2
    }

    pub fn lora(&self) -> Option<&LoraFactors> {
        self.lora.as_ref()
    }

    pub(crate) fn w1_mut(&mut self) -> &mut Matrix {
        &mut self.w1
    }

    pub(crate) fn w2_mut(&mut self) -> &mut Matrix {
        &mut self.w2
    }

    pub(crate) fn lora_mut(&mut self) -> Option<&mut LoraFactors> {
        self.lora.as_mut()
    }

    /// Base parameter count: d·h + h·d.
    pub fn param_count(&self) -> usize {
        self.d * self.h + self.h * self.d
    }

    /// Attach fresh adapters: A uniform in ±1/sqrt(fan_in of its layer),
    /// B zero, so the forward pass is unchanged until training moves B.
    pub fn init_lora(&mut self, rank: usize, seed: u64) -> Result<()> {
        if rank == 0 {
            return Err(DpqError::Config("adapter rank must be positive".into()));
        }
        let mut rng = Rng::seeded(derive_seed(seed, "decoder.lora"));
        let s1 = 1.0 / (self.d as f64).sqrt();
        let s2 = 1.0 / (self.h as f64).sqrt();
        let a1 = Matrix::from_raw(
            rank,
            self.h,
            (0..rank * self.h).map(|_| rng.uniform(-s1, s1)).collect(),
        );
        let a2 = Matrix::from_raw(
            rank,
            self.d,
            (0..rank * self.d).map(|_| rng.uniform(-s2, s2)).collect(),
        );
        self.lora = Some(LoraFactors {
            rank,
            a1,
            b1: Matrix::zeros(self.d, rank),
            a2,
            b2: Matrix::zeros(self.h, rank),
        });
        Ok(())
    }

    /// Effective first-layer weights W1 + B1·A1.
    pub fn effective_w1(&self) -> Result<Matrix> {
        match &self.lora {
            None => Ok(self.w1.clone()),
            Some(f) => {
                let mut w = f.b1.matmul(&f.a1)?;
                w.add_scaled(&self.w1, 1.0)?;
                Ok(w)
            }
        }
    }

    /// Effective second-layer weights W2 + B2·A2.
    pub fn effective_w2(&self) -> Result<Matrix> {
        match &self.lora {
            None => Ok(self.w2.clone()),
            Some(f) => {
                let mut w = f.b2.matmul(&f.a2)?;
                w.add_scaled(&self.w2, 1.0)?;
                Ok(w)
            }
        }
    }

    /// Extract the adapter as a standalone delta.
    pub fn delta(&self) -> Option<LoraDelta> {
        self.lora.as_ref().map(|f| LoraDelta {
            d: self.d,
            h: self.h,
            factors: f.clone(),
        })
    }

    /// Return a copy of these weights with the delta's adapter attached.
    pub fn with_delta(&self, delta: &LoraDelta) -> Result<DecoderWeights> {
        if delta.d != self.d || delta.h != self.h {
            return Err(DpqError::Dimension(format!(
                "delta is for a {}x{} decoder, this one is {}x{}",
                delta.d, delta.h, self.d, self.h
            )));
        }
        let mut out = self.clone();
        out.lora = Some(delta.factors.clone());
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        let (flag, rank) = match &self.lora {
            Some(f) => (1u8, f.rank as u32),
            None => (0u8, 0u32),
        };
        w.magic(DEC_MAGIC)
            .u32(DEC_VERSION)
            .u32(self.d as u32)
            .u32(self.h as u32)
            .u8(flag)
            .u32(rank)
            .f32_slice(self.w1.data())
            .f32_slice(self.w2.data());
        if let Some(f) = &self.lora {
            w.f32_slice(f.a1.data())
                .f32_slice(f.b1.data())
                .f32_slice(f.a2.data())
                .f32_slice(f.b2.data());
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<DecoderWeights> {
        let mut r = Reader::new(bytes);
        r.expect_magic(DEC_MAGIC)?;
        let version = r.read_u32("version")?;
        if version != DEC_VERSION {
            return Err(DpqError::Format {
                offset: 4,
                what: format!("unsupported decoder version {version}"),
            });
        }
        let d = r.read_u32("d")? as usize;
        let h = r.read_u32("h")? as usize;
        let flag = r.read_u8("lora flag")?;
        if flag > 1 {
            return Err(DpqError::Format {
                offset: r.position() - 1,
                what: format!("lora flag must be 0 or 1, got {flag}"),
            });
        }
        let rank = r.read_u32("rank")? as usize;
        if d == 0 || h == 0 {
            return Err(DpqError::Format {
                offset: 8,
                what: format!("degenerate decoder dims d={d}, h={h}"),
            });
        }
        let w1 = Matrix::new(d, h, r.read_f32_vec(d * h, "w1")?)?;
        let w2 = Matrix::new(h, d, r.read_f32_vec(h * d, "w2")?)?;
        let lora = if flag == 1 {
            if rank == 0 {
                return Err(DpqError::Format {
                    offset: 13,
                    what: "lora flagged but rank is zero".into(),
                });
            }
            Some(LoraFactors {
                rank,
                a1: Matrix::new(rank, h, r.read_f32_vec(rank * h, "a1")?)?,
                b1: Matrix::new(d, rank, r.read_f32_vec(d * rank, "b1")?)?,
                a2: Matrix::new(rank, d, r.read_f32_vec(rank * d, "a2")?)?,
                b2: Matrix::new(h, rank, r.read_f32_vec(h * rank, "b2")?)?,
            })
        } else {
            None
        };
        r.expect_end()?;
        let mut out = DecoderWeights::from_matrices(w1, w2)?;
        out.lora = lora;
        Ok(out)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<DecoderWeights> {
        DecoderWeights::from_bytes(&std::fs::read(path)?)
    }
}

/// Standalone adapter delta, stored separately from the (shared) base
/// decoder. At d = h = 256, r = 2 the payload is exactly 8192 bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraDelta {
    d: usize,
    h: usize,
    factors: LoraFactors,
}

impl LoraDelta {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn hidden(&self) -> usize {
        self.h
    }

    pub fn rank(&self) -> usize {
        self.factors.rank
    }

    pub fn param_count(&self) -> usize {
        self.factors.param_count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let f = &self.factors;
        let mut w = Writer::new();
        w.magic(DLT_MAGIC)
            .u32(DLT_VERSION)
            .u32(self.d as u32)
            .u32(self.h as u32)
            .u32(f.rank as u32)
            .f32_slice(f.a1.data())
            .f32_slice(f.b1.data())
            .f32_slice(f.a2.data())
            .f32_slice(f.b2.data());
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<LoraDelta> {
        let mut r = Reader::new(bytes);
        r.expect_magic(DLT_MAGIC)?;
        let version = r.read_u32("version")?;
        if version != DLT_VERSION {
            return Err(DpqError::Format {
                offset: 4,
                what: format!("unsupported delta version {version}"),
            });
        }
        let d = r.read_u32("d")? as usize;
        let h = r.read_u32("h")? as usize;
        let rank = r.read_u32("rank")? as usize;
        if d == 0 || h == 0 || rank == 0 {
            return Err(DpqError::Format {
                offset: 8,
                what: format!("degenerate delta dims d={d}, h={h}, rank={rank}"),
            });
        }
        let factors = LoraFactors {
            rank,
            a1: Matrix::new(rank, h, r.read_f32_vec(rank * h, "a1")?)?,
            b1: Matrix::new(d, rank, r.read_f32_vec(d * rank, "b1")?)?,
            a2: Matrix::new(rank, d, r.read_f32_vec(rank * d, "a2")?)?,
            b2: Matrix::new(h, rank, r.read_f32_vec(h * rank, "b2")?)?,
        };
        r.expect_end()?;
        Ok(LoraDelta { d, h, factors })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<LoraDelta> {
        LoraDelta::from_bytes(&std::fs::read(path)?)
    }
}

/// Forward cache: hidden activations and the output.
#[derive(Debug, Clone)]
pub struct DecoderForward {
    hidden: Matrix, // n x h, relu already applied
    output: Matrix, // n x d
}

impl DecoderForward {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn hidden(&self) -> &Matrix {
        &self.hidden
    }
}

/// out = relu(q · W1′) · W2′ with the effective (adapter-merged) weights.
pub fn decoder_forward(q: &Matrix, w: &DecoderWeights) -> Result<DecoderForward> {
    if q.cols() != w.dim() {
        return Err(DpqError::Dimension(format!(
            "decoder input dim {} does not match weights dim {}",
            q.cols(),
            w.dim()
        )));
    }
    let w1 = w.effective_w1()?;
    let w2 = w.effective_w2()?;
    let hidden = q.matmul(&w1)?.map(|v| v.max(0.0));
    let output = hidden.matmul(&w2)?;
    Ok(DecoderForward { hidden, output })
}

/// Gradients for full training: both base weight matrices plus the input.
#[derive(Debug, Clone)]
pub struct DecoderGrads {
    pub grad_w1: Matrix,
    pub grad_w2: Matrix,
    pub grad_input: Matrix,
}

/// Gradients for adapter-only finetuning. Base weights stay frozen.
#[derive(Debug, Clone)]
pub struct LoraGrads {
    pub grad_a1: Matrix,
    pub grad_b1: Matrix,
    pub grad_a2: Matrix,
    pub grad_b2: Matrix,
    pub grad_input: Matrix,
}

/// Shared backward core: gradients with respect to the effective weights
/// and the input.
fn backward_core(
    fwd: &DecoderForward,
    input: &Matrix,
    w: &DecoderWeights,
    grad_output: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    if grad_output.rows() != fwd.output.rows() || grad_output.cols() != fwd.output.cols() {
        return Err(DpqError::Dimension(format!(
            "grad_output is {}x{}, want {}x{}",
            grad_output.rows(),
            grad_output.cols(),
            fwd.output.rows(),
            fwd.output.cols()
        )));
    }
    if input.rows() != fwd.hidden.rows() || input.cols() != w.dim() {
        return Err(DpqError::Dimension(
            "input does not match the forward cache".into(),
        ));
    }
    let w1 = w.effective_w1()?;
    let w2 = w.effective_w2()?;

    // grad_w2' = hiddenᵀ · g ; grad_hidden = g · w2'ᵀ, masked by relu.
    let grad_w2 = fwd.hidden.transpose().matmul(grad_output)?;
    let grad_hidden = grad_output.matmul(&w2.transpose())?;
    let mut grad_z = grad_hidden;
    for i in 0..grad_z.rows() {
        let h = fwd.hidden.row(i);
        for (gz, &hv) in grad_z.row_mut(i).iter_mut().zip(h) {
            if hv <= 0.0 {
                *gz = 0.0;
            }
        }
    }
    let grad_w1 = input.transpose().matmul(&grad_z)?;
    let grad_input = grad_z.matmul(&w1.transpose())?;
    Ok((grad_w1, grad_w2, grad_input))
}

/// Backward pass for full training (base weights trainable).
pub fn decoder_backward(
    fwd: &DecoderForward,
    input: &Matrix,
    w: &DecoderWeights,
    grad_output: &Matrix,
) -> Result<DecoderGrads> {
    let (grad_w1, grad_w2, grad_input) = backward_core(fwd, input, w, grad_output)?;
    Ok(DecoderGrads {
        grad_w1,
        grad_w2,
        grad_input,
    })
}

/// Backward pass for adapter-only finetuning: gradients land on the
/// factors via grad_A = Bᵀ·grad_W′ and grad_B = grad_W′·Aᵀ.
pub fn decoder_backward_lora(
    fwd: &DecoderForward,
    input: &Matrix,
    w: &DecoderWeights,
    grad_output: &Matrix,
) -> Result<LoraGrads> {
    let f = w.lora.as_ref().ok_or_else(|| {
        DpqError::Config("adapter backward requires weights with an adapter attached".into())
    })?;
    let (grad_w1, grad_w2, grad_input) = backward_core(fwd, input, w, grad_output)?;
    Ok(LoraGrads {
        grad_a1: f.b1.transpose().matmul(&grad_w1)?,
        grad_b1: grad_w1.matmul(&f.a1.transpose())?,
        grad_a2: f.b2.transpose().matmul(&grad_w2)?,
        grad_b2: grad_w2.matmul(&f.a2.transpose())?,
        grad_input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, finite_diff_check, Rng};

    fn random_matrix(r: usize, c: usize, seed: u64) -> Matrix {
        let mut rng = Rng::seeded(seed);
        Matrix::from_raw(r, c, (0..r * c).map(|_| rng.normal()).collect())
    }

    #[test]
    fn param_count_at_paper_dims() {
        let w = DecoderWeights::init(256, 256, 0).unwrap();
        assert_eq!(w.param_count(), 131072);
    }

    #[test]
    fn lora_param_count_and_delta_payload_at_rank_two() {
        let mut w = DecoderWeights::init(256, 256, 0).unwrap();
        w.init_lora(2, 1).unwrap();
        let delta = w.delta().unwrap();
        assert_eq!(delta.param_count(), 2048);
        let bytes = delta.to_bytes();
        // 4 magic + 4 version + 4 d + 4 h + 4 rank = 20 header bytes,
        // then 2048 f32 parameters.
        assert_eq!(bytes.len() - 20, 8192);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let w = DecoderWeights::from_matrices(Matrix::zeros(3, 4), Matrix::zeros(4, 3)).unwrap();
        let q = random_matrix(2, 3, 5);
        let fwd = decoder_forward(&q, &w).unwrap();
        assert!(fwd.output().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_weights_pass_positive_inputs_through() {
        let eye = |n: usize| {
            let mut m = Matrix::zeros(n, n);
            for i in 0..n {
                m.set(i, i, 1.0);
            }
            m
        };
        let w = DecoderWeights::from_matrices(eye(4), eye(4)).unwrap();
        let mut rng = Rng::seeded(9);
        let q = Matrix::from_raw(3, 4, (0..12).map(|_| rng.f64() + 0.01).collect());
        let fwd = decoder_forward(&q, &w).unwrap();
        assert_eq!(fwd.output().data(), q.data());
    }

    #[test]
    fn fresh_adapter_leaves_forward_bitwise_unchanged() {
        let mut w = DecoderWeights::init(6, 5, 3).unwrap();
        let q = random_matrix(4, 6, 4);
        let base = decoder_forward(&q, &w).unwrap();
        w.init_lora(2, 7).unwrap();
        let with = decoder_forward(&q, &w).unwrap();
        let a: Vec<u64> = base.output().data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = with.output().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn full_gradients_match_finite_differences() {
        for seed in 0..5u64 {
            let (d, h, n) = (4, 5, 3);
            let w = DecoderWeights::init(d, h, 40 + seed).unwrap();
            let q = random_matrix(n, d, 50 + seed);
            let probe = random_matrix(n, d, 60 + seed);

            let fwd = decoder_forward(&q, &w).unwrap();
            let back = decoder_backward(&fwd, &q, &w, &probe).unwrap();

            // Flatten (w1, w2) and check jointly.
            let mut params = w.w1().data().to_vec();
            params.extend_from_slice(w.w2().data());
            let mut analytic = back.grad_w1.data().to_vec();
            analytic.extend_from_slice(back.grad_w2.data());
            let err = finite_diff_check(
                |p| {
                    let w1 = Matrix::from_raw(d, h, p[..d * h].to_vec());
                    let w2 = Matrix::from_raw(h, d, p[d * h..].to_vec());
                    let ww = DecoderWeights::from_matrices(w1, w2).unwrap();
                    let f = decoder_forward(&q, &ww).unwrap();
                    dot(f.output().data(), probe.data())
                },
                &params,
                &analytic,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: weight grad rel err {err}");

            // Input gradient.
            let err_in = finite_diff_check(
                |x| {
                    let qq = Matrix::from_raw(n, d, x.to_vec());
                    let f = decoder_forward(&qq, &w).unwrap();
                    dot(f.output().data(), probe.data())
                },
                &q.data().to_vec(),
                back.grad_input.data(),
                1e-5,
            )
            .unwrap();
            assert!(err_in < 1e-4, "seed {seed}: input grad rel err {err_in}");
        }
    }

    #[test]
    fn lora_gradients_match_finite_differences() {
        for seed in 0..5u64 {
            let (d, h, r, n) = (4, 5, 2, 3);
            let mut w = DecoderWeights::init(d, h, 70 + seed).unwrap();
            w.init_lora(r, 80 + seed).unwrap();
            // Move B off zero so every factor influences the loss.
            {
                let f = w.lora_mut().unwrap();
                let mut rng = Rng::seeded(90 + seed);
                for v in f.b1.data_mut() {
                    *v = 0.3 * rng.normal();
                }
                for v in f.b2.data_mut() {
                    *v = 0.3 * rng.normal();
                }
            }
            let q = random_matrix(n, d, 100 + seed);
            let probe = random_matrix(n, d, 110 + seed);

            let fwd = decoder_forward(&q, &w).unwrap();
            let back = decoder_backward_lora(&fwd, &q, &w, &probe).unwrap();

            let f = w.lora().unwrap().clone();
            let mut params = f.a1.data().to_vec();
            params.extend_from_slice(f.b1.data());
            params.extend_from_slice(f.a2.data());
            params.extend_from_slice(f.b2.data());
            let mut analytic = back.grad_a1.data().to_vec();
            analytic.extend_from_slice(back.grad_b1.data());
            analytic.extend_from_slice(back.grad_a2.data());
            analytic.extend_from_slice(back.grad_b2.data());

            let base = w.clone();
            let err = finite_diff_check(
                |p| {
                    let mut probe_w = base.clone();
                    let lf = probe_w.lora_mut().unwrap();
                    let (n1, n2, n3) = (r * h, r * h + d * r, r * h + d * r + r * d);
                    lf.a1 = Matrix::from_raw(r, h, p[..n1].to_vec());
                    lf.b1 = Matrix::from_raw(d, r, p[n1..n2].to_vec());
                    lf.a2 = Matrix::from_raw(r, d, p[n2..n3].to_vec());
                    lf.b2 = Matrix::from_raw(h, r, p[n3..].to_vec());
                    let fw = decoder_forward(&q, &probe_w).unwrap();
                    dot(fw.output().data(), probe.data())
                },
                &params,
                &analytic,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: adapter grad rel err {err}");
        }
    }

    #[test]
    fn dec_roundtrip_with_and_without_adapter() {
        let mut w = DecoderWeights::init(4, 6, 11).unwrap();
        let bytes = w.to_bytes();
        let back = DecoderWeights::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert!(back.lora().is_none());

        w.init_lora(2, 12).unwrap();
        let bytes2 = w.to_bytes();
        let back2 = DecoderWeights::from_bytes(&bytes2).unwrap();
        assert_eq!(back2.to_bytes(), bytes2);
        assert_eq!(back2.lora().unwrap().rank(), 2);
    }

    #[test]
    fn dec_format_errors() {
        let w = DecoderWeights::init(3, 3, 0).unwrap();
        let bytes = w.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'x';
        assert!(matches!(
            DecoderWeights::from_bytes(&bad),
            Err(DpqError::Format { offset: 0, .. })
        ));
        assert!(matches!(
            DecoderWeights::from_bytes(&bytes[..bytes.len() - 3]),
            Err(DpqError::Format { .. })
        ));
        let mut trailing = bytes.clone();
        trailing.push(9);
        assert!(matches!(
            DecoderWeights::from_bytes(&trailing),
            Err(DpqError::Format { .. })
        ));
    }

    #[test]
    fn delta_roundtrip_and_apply() {
        let mut w = DecoderWeights::init(5, 4, 21).unwrap();
        w.init_lora(3, 22).unwrap();
        {
            let f = w.lora_mut().unwrap();
            let mut rng = Rng::seeded(23);
            for v in f.b1.data_mut() {
                *v = rng.normal();
            }
        }
        let delta = w.delta().unwrap();
        let bytes = delta.to_bytes();
        let back = LoraDelta::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);

        // Applying the delta to a fresh copy of the base reproduces the
        // adapted forward exactly.
        let mut base = DecoderWeights::init(5, 4, 21).unwrap();
        base = base.with_delta(&back).unwrap();
        let q = random_matrix(2, 5, 24);
        // The adapted copy saw f32 truncation through the file, so compare
        // against the truncated original.
        let w_trunc = DecoderWeights::from_bytes(&w.to_bytes()).unwrap();
        let base_trunc = DecoderWeights::from_bytes(&base.to_bytes()).unwrap();
        let a = decoder_forward(&q, &w_trunc).unwrap();
        let b = decoder_forward(&q, &base_trunc).unwrap();
        assert_eq!(a.output().data(), b.output().data());

        // Dimension mismatch is rejected.
        let other = DecoderWeights::init(4, 4, 0).unwrap();
        assert!(other.with_delta(&back).is_err());
    }

    #[test]
    fn lora_backward_requires_adapter() {
        let w = DecoderWeights::init(3, 3, 1).unwrap();
        let q = random_matrix(2, 3, 2);
        let fwd = decoder_forward(&q, &w).unwrap();
        assert!(matches!(
            decoder_backward_lora(&fwd, &q, &w, &Matrix::zeros(2, 3)),
            Err(DpqError::Config(_))
        ));
    }

    #[test]
    fn relu_mask_zeroes_dead_units() {
        // One hidden unit forced dead: its column in grad_w1 must be zero.
        let w1 = Matrix::new(2, 2, vec![1.0, -5.0, 0.0, -5.0]).unwrap();
        let w2 = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let w = DecoderWeights::from_matrices(w1, w2).unwrap();
        let q = Matrix::new(1, 2, vec![1.0, 1.0]).unwrap(); // z = [1, -10]
        let fwd = decoder_forward(&q, &w).unwrap();
        assert_eq!(fwd.hidden().data(), &[1.0, 0.0]);
        let g = Matrix::new(1, 2, vec![1.0, 1.0]).unwrap();
        let back = decoder_backward(&fwd, &q, &w, &g).unwrap();
        assert_eq!(back.grad_w1.get(0, 1), 0.0);
        assert_eq!(back.grad_w1.get(1, 1), 0.0);
    }
}
