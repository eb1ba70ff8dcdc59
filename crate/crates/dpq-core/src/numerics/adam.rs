//! Adam optimizer over a flat parameter vector.

use crate::error::{DpqError, Result};

/// Adam hyperparameters. Defaults are the standard ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams {
            lr,
            ..AdamParams::default()
        }
    }
}

/// First/second moment estimates plus the step counter. One state drives the
/// whole concatenated parameter vector of a training run.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update, in place:
    /// m ← β₁m + (1-β₁)g, v ← β₂v + (1-β₂)g², p ← p − lr·m̂/(√v̂ + ε).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], hp: &AdamParams) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(DpqError::Dimension(format!(
                "adam state over {} values got params {} / grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
            return Err(DpqError::Numeric(format!(
                "non-finite gradient at flat index {pos}"
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = hp.beta1 * self.m[i] + (1.0 - hp.beta1) * g;
            self.v[i] = hp.beta2 * self.v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_hand_value() {
        // param 1.0, grad 2.0, lr 1e-3, defaults: update = lr*mhat/(sqrt(vhat)+eps)
        // with mhat = 2, vhat = 4 after bias correction -> ~0.001.
        let mut p = vec![1.0];
        let mut st = AdamState::new(1);
        st.step(&mut p, &[2.0], &AdamParams::default()).unwrap();
        assert!((p[0] - 0.999).abs() < 1e-8, "got {}", p[0]);
    }

    #[test]
    fn matches_independent_scalar_reference_two_steps() {
        // Scalar Adam written separately, step by step.
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let grads = [0.3, -1.7];
        let mut p_ref: f64 = 0.5;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p_ref -= lr * mh / (vh.sqrt() + eps);
        }

        let hp = AdamParams {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
        };
        let mut p = vec![0.5];
        let mut st = AdamState::new(1);
        for g in grads {
            st.step(&mut p, &[g], &hp).unwrap();
        }
        assert!((p[0] - p_ref).abs() < 1e-15, "{} vs {p_ref}", p[0]);
    }

    #[test]
    fn deterministic_repetition() {
        let run = || {
            let mut p = vec![1.0, -2.0, 0.25];
            let mut st = AdamState::new(3);
            for k in 0..10 {
                let g = [0.1 * k as f64, -0.3, 2.0];
                st.step(&mut p, &g, &AdamParams::default()).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_lr_leaves_params_bitwise_unchanged() {
        let mut p = vec![1.0f64, -0.5];
        let before: Vec<u64> = p.iter().map(|x| x.to_bits()).collect();
        let mut st = AdamState::new(2);
        let hp = AdamParams {
            lr: 0.0,
            ..AdamParams::default()
        };
        for _ in 0..5 {
            st.step(&mut p, &[3.0, -1.0], &hp).unwrap();
        }
        let after: Vec<u64> = p.iter().map(|x| x.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = vec![0.7];
        let mut st = AdamState::new(1);
        st.step(&mut p, &[0.0], &AdamParams::default()).unwrap();
        assert_eq!(p[0], 0.7);
    }

    #[test]
    fn shape_and_nan_guards() {
        let mut st = AdamState::new(2);
        let mut p = vec![0.0; 3];
        assert!(matches!(
            st.step(&mut p, &[0.0; 3], &AdamParams::default()),
            Err(DpqError::Dimension(_))
        ));
        let mut p2 = vec![0.0; 2];
        assert!(matches!(
            st.step(&mut p2, &[0.0, f64::NAN], &AdamParams::default()),
            Err(DpqError::Numeric(_))
        ));
    }
}
