//! Map compression: choose a weighted subset of scene points under a
//! memory budget by solving a small quadratic program.
//!
//! Given m scene points with pairwise-similarity kernel K and a
//! per-point distinctiveness score d, find weights v minimizing
//!
//!   f(v) = vᵀ K v − τ dᵀ v
//!   s.t. Σ v = 1,  0 ≤ v_i ≤ 1/(α·m)
//!
//! The quadratic term spreads weight away from redundant (mutually
//! similar) points, the linear term pulls it toward distinctive ones,
//! and the cap ties the support size to the compression ratio α: at
//! most ⌈α·m⌉ points can hold nonzero weight... and at α = 1 the only
//! feasible point is the uniform distribution.
//!
//! The solver is projected gradient descent with backtracking; the
//! projection onto the capped simplex is computed exactly (to floating
//! point) by bisection on the shift λ in v_i(λ) = clip(v_i − λ, 0, cap).
//!
//! A memory-budget planner converts a byte budget into α by comparing
//! it against the full code size of the database.

use crate::codebook::code_bits;
use crate::error::{DpqError, Result};
use crate::numerics::{dot, squared_dist, Matrix};
use crate::store::ScenePointSet;

/// How pairwise similarity between scene points is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// Gaussian similarity exp(−‖p_i−p_j‖² / (2σ²)). The default:
    /// bounded, positive semidefinite, and its diagonal dominance keeps
    /// the objective well conditioned.
    Rbf,
    /// Raw Euclidean distance ‖p_i−p_j‖. Provided for comparison; note
    /// this reverses the redundancy semantics (nearby points score low),
    /// so it rewards concentrating weight on mutually close points.
    Distance,
}

impl KernelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            KernelKind::Rbf => "rbf",
            KernelKind::Distance => "distance",
        }
    }

    pub fn parse(s: &str) -> Result<KernelKind> {
        match s {
            "rbf" => Ok(KernelKind::Rbf),
            "distance" => Ok(KernelKind::Distance),
            other => Err(DpqError::Config(format!(
                "unknown kernel kind '{other}' (expected rbf or distance)"
            ))),
        }
    }
}

/// Median pairwise distance over a deterministic stride subsample of at
/// most 1000 points — the default RBF bandwidth.
fn median_pairwise_distance(positions: &Matrix) -> Result<f64> {
    let m = positions.rows();
    let stride = m.div_ceil(1000).max(1);
    let idx: Vec<usize> = (0..m).step_by(stride).collect();
    let mut dists = Vec::with_capacity(idx.len() * (idx.len().saturating_sub(1)) / 2);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            dists.push(squared_dist(positions.row(i), positions.row(j)).sqrt());
        }
    }
    if dists.is_empty() {
        return Err(DpqError::Input(
            "need at least two scene points to estimate a kernel bandwidth".into(),
        ));
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    if median <= 0.0 {
        return Err(DpqError::Numeric(
            "median pairwise distance is zero; positions are degenerate".into(),
        ));
    }
    Ok(median)
}

/// Build the m×m kernel matrix. For the Gaussian kernel, `sigma = None`
/// selects the median-pairwise-distance bandwidth; the bandwidth used is
/// returned (0.0 for the distance kernel, which has none).
pub fn build_kernel(
    positions: &Matrix,
    kind: KernelKind,
    sigma: Option<f64>,
) -> Result<(Matrix, f64)> {
    let m = positions.rows();
    if m == 0 {
        return Err(DpqError::Input("no scene points".into()));
    }
    let sigma = match (kind, sigma) {
        (KernelKind::Rbf, Some(s)) => {
            if !(s > 0.0 && s.is_finite()) {
                return Err(DpqError::Config(format!(
                    "kernel bandwidth must be positive and finite, got {s}"
                )));
            }
            s
        }
        (KernelKind::Rbf, None) => median_pairwise_distance(positions)?,
        (KernelKind::Distance, _) => 0.0,
    };
    let mut k = Matrix::zeros(m, m);
    // Fill the upper triangle and mirror: the kernel is symmetric by
    // construction and this keeps it exactly so in floating point.
    for i in 0..m {
        match kind {
            KernelKind::Rbf => k.set(i, i, 1.0),
            KernelKind::Distance => k.set(i, i, 0.0),
        }
        for j in i + 1..m {
            let sq = squared_dist(positions.row(i), positions.row(j));
            let val = match kind {
                KernelKind::Rbf => (-sq / (2.0 * sigma * sigma)).exp(),
                KernelKind::Distance => sq.sqrt(),
            };
            k.set(i, j, val);
            k.set(j, i, val);
        }
    }
    Ok((k, sigma))
}

/// A fully-specified map-compression QP instance.
#[derive(Debug, Clone)]
pub struct CompressionProblem {
    kernel: Matrix,
    d: Vec<f64>,
    tau: f64,
    alpha: f64,
}

impl CompressionProblem {
    pub fn new(kernel: Matrix, d: Vec<f64>, tau: f64, alpha: f64) -> Result<CompressionProblem> {
        let m = kernel.rows();
        if kernel.cols() != m || m == 0 {
            return Err(DpqError::Dimension(format!(
                "kernel must be square and non-empty, got {}x{}",
                kernel.rows(),
                kernel.cols()
            )));
        }
        if d.len() != m {
            return Err(DpqError::Dimension(format!(
                "{} scores for {} points",
                d.len(),
                m
            )));
        }
        if !d.iter().all(|v| v.is_finite()) || !tau.is_finite() {
            return Err(DpqError::Numeric(
                "scores and tradeoff weight must be finite".into(),
            ));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(DpqError::Config(format!(
                "compression ratio must be positive, got {alpha}"
            )));
        }
        if alpha > 1.0 {
            // cap·m = 1/alpha < 1: the simplex constraint cannot be met.
            return Err(DpqError::Infeasible(format!(
                "compression ratio {alpha} > 1 leaves the weight cap below 1/m"
            )));
        }
        Ok(CompressionProblem {
            kernel,
            d,
            tau,
            alpha,
        })
    }

    /// Build a problem from a scene: kernel from point positions,
    /// linear term from distinctiveness scores normalized to zero mean
    /// and unit maximum magnitude (so `tau` has a scale-free meaning).
    /// Returns the problem and the kernel bandwidth used.
    pub fn from_scene(
        scene: &ScenePointSet,
        kind: KernelKind,
        sigma: Option<f64>,
        tau: f64,
        alpha: f64,
    ) -> Result<(CompressionProblem, f64)> {
        let (kernel, used_sigma) = build_kernel(scene.positions(), kind, sigma)?;
        let raw = scene.distinctiveness();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let mut d: Vec<f64> = raw.iter().map(|v| v - mean).collect();
        let max_abs = d.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if max_abs > 0.0 {
            for v in &mut d {
                *v /= max_abs;
            }
        }
        let problem = CompressionProblem::new(kernel, d, tau, alpha)?;
        Ok((problem, used_sigma))
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    pub fn kernel(&self) -> &Matrix {
        &self.kernel
    }

    pub fn scores(&self) -> &[f64] {
        &self.d
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Per-point weight cap 1/(α·m).
    pub fn cap(&self) -> f64 {
        1.0 / (self.alpha * self.len() as f64)
    }

    /// f(v) = vᵀKv − τ·dᵀv.
    pub fn objective(&self, v: &[f64]) -> Result<f64> {
        let m = self.len();
        if v.len() != m {
            return Err(DpqError::Dimension(format!(
                "point has {} entries, problem has {m}",
                v.len()
            )));
        }
        let mut quad = 0.0;
        for i in 0..m {
            quad += v[i] * dot(self.kernel.row(i), v);
        }
        Ok(quad - self.tau * dot(&self.d, v))
    }

    /// ∇f(v) = (K + Kᵀ)v − τ·d. The kernels built here are symmetric,
    /// but the general form keeps hand-constructed problems correct.
    fn gradient(&self, v: &[f64], out: &mut [f64]) {
        let m = self.len();
        for i in 0..m {
            let mut g = dot(self.kernel.row(i), v);
            for j in 0..m {
                g += self.kernel.get(j, i) * v[j];
            }
            out[i] = g - self.tau * self.d[i];
        }
    }
}

/// Euclidean projection onto {w : Σw = 1, 0 ≤ w_i ≤ cap}, by bisection
/// on the shift λ in w_i(λ) = clip(v_i − λ, 0, cap). The mass function
/// Σ w_i(λ) is continuous and non-increasing in λ, so bisection pins λ
/// to full floating-point precision in ~100 halvings.
pub fn project_capped_simplex(v: &[f64], cap: f64) -> Result<Vec<f64>> {
    let m = v.len();
    if m == 0 {
        return Err(DpqError::Input("cannot project an empty vector".into()));
    }
    if !(cap > 0.0 && cap.is_finite()) {
        return Err(DpqError::Config(format!(
            "weight cap must be positive and finite, got {cap}"
        )));
    }
    if (cap * m as f64) < 1.0 - 1e-9 {
        return Err(DpqError::Infeasible(format!(
            "cap {cap} × {m} points < 1: the capped simplex is empty"
        )));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(DpqError::Numeric("projection input must be finite".into()));
    }

    let mass = |lambda: f64| -> f64 {
        v.iter()
            .map(|&x| (x - lambda).clamp(0.0, cap))
            .sum::<f64>()
    };
    // At lo every coordinate is at its cap (mass ≥ 1); at hi every
    // coordinate is clipped to zero (mass 0).
    let mut lo = v.iter().cloned().fold(f64::INFINITY, f64::min) - cap;
    let mut hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * lo.abs().max(hi.abs()).max(1.0) {
            break;
        }
    }
    Ok(v.iter().map(|&x| (x - lo).clamp(0.0, cap)).collect())
}

/// Result of the projected-gradient solve.
#[derive(Debug, Clone)]
pub struct QpSolution {
    /// Optimal weights (feasible: Σv = 1, 0 ≤ v ≤ cap).
    pub v: Vec<f64>,
    /// Objective value at `v`.
    pub objective: f64,
    /// Gradient iterations actually performed.
    pub iterations: usize,
}

/// Default iteration budget for the QP solver.
pub const DEFAULT_QP_ITERS: usize = 500;

/// Solve the map-compression QP by projected gradient descent with
/// backtracking line search. Deterministic: starts from the uniform
/// weights and uses no randomness. The objective never increases.
pub fn solve_map_qp(problem: &CompressionProblem, max_iters: usize) -> Result<QpSolution> {
    let m = problem.len();
    let cap = problem.cap();
    let uniform = vec![1.0 / m as f64; m];
    let mut v = project_capped_simplex(&uniform, cap)?;
    let mut f_v = problem.objective(&v)?;

    let mut grad = vec![0.0; m];
    let mut step = 1.0;
    let mut iterations = 0;
    for _ in 0..max_iters {
        problem.gradient(&v, &mut grad);
        let mut accepted = false;
        let mut t = step;
        while t >= 1e-18 {
            let trial: Vec<f64> = v.iter().zip(&grad).map(|(&x, &g)| x - t * g).collect();
            let cand = project_capped_simplex(&trial, cap)?;
            let f_c = problem.objective(&cand)?;
            if f_c <= f_v {
                let moved = cand
                    .iter()
                    .zip(&v)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0_f64, f64::max);
                v = cand;
                f_v = f_c;
                accepted = moved > 1e-15;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break; // no descent direction produces movement: stationary
        }
        step = (t * 2.0).min(1e6);
    }
    Ok(QpSolution {
        v,
        objective: f_v,
        iterations,
    })
}

/// Turn solved weights into a kept-point list: drop weights below
/// 1e-6·cap, order by weight descending (ties: higher distinctiveness
/// score, then lower index), and keep at most ⌈α·m⌉ points.
pub fn select_points(v: &[f64], scores: &[f64], alpha: f64) -> Result<Vec<usize>> {
    if v.len() != scores.len() {
        return Err(DpqError::Dimension(format!(
            "{} weights for {} scores",
            v.len(),
            scores.len()
        )));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(DpqError::Config(format!(
            "compression ratio must be in (0, 1], got {alpha}"
        )));
    }
    let m = v.len();
    let cap = 1.0 / (alpha * m as f64);
    let threshold = 1e-6 * cap;
    let mut kept: Vec<usize> = (0..m).filter(|&i| v[i] > threshold).collect();
    kept.sort_by(|&a, &b| {
        v[b].partial_cmp(&v[a])
            .expect("weights are finite")
            .then(
                scores[b]
                    .partial_cmp(&scores[a])
                    .expect("scores are finite"),
            )
            .then(a.cmp(&b))
    });
    let limit = (alpha * m as f64).ceil() as usize;
    kept.truncate(limit);
    Ok(kept)
}

/// Memory plan for a quantized database under a byte budget.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionPlan {
    /// Bytes the full database of codes would occupy: n·m·log₂(k)/8.
    pub full_code_bytes: f64,
    /// Budget divided by full size, clamped to 1: the fraction of
    /// points that fit.
    pub alpha: f64,
    /// ⌈α·n⌉ — how many of the n points the budget admits.
    pub kept_points: usize,
}

/// Plan how much of an n-point database a byte budget admits when each
/// point is coded with m subspaces of k centroids.
pub fn plan_budget(
    n: usize,
    m_subspaces: usize,
    k: usize,
    budget_bytes: u64,
) -> Result<CompressionPlan> {
    if n == 0 {
        return Err(DpqError::Input("database has no points".into()));
    }
    let bits = code_bits(m_subspaces, k)? as f64;
    let full_code_bytes = n as f64 * bits / 8.0;
    if budget_bytes == 0 {
        return Err(DpqError::Infeasible(
            "budget of zero bytes admits no points".into(),
        ));
    }
    let alpha = (budget_bytes as f64 / full_code_bytes).min(1.0);
    let kept_points = ((alpha * n as f64).ceil() as usize).min(n);
    Ok(CompressionPlan {
        full_code_bytes,
        alpha,
        kept_points,
    })
}
