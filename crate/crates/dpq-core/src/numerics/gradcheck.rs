//! Central finite-difference verification of analytic gradients.

use crate::error::{DpqError, Result};

/// Denominator floor for the relative error, so near-zero gradients are
/// compared at a sane absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Compare `analytic` against central finite differences of `f` at `x`.
///
/// For each coordinate: fd_i = (f(x + h·e_i) − f(x − h·e_i)) / 2h, and the
/// relative error is |fd_i − analytic_i| / max(|fd_i|, floor). Returns the
/// maximum relative error over all coordinates.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    h: f64,
) -> Result<f64> {
    if x.len() != analytic.len() {
        return Err(DpqError::Dimension(format!(
            "point has {} coordinates, gradient has {}",
            x.len(),
            analytic.len()
        )));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(DpqError::Config(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(DpqError::Numeric(format!(
                "objective non-finite when probing coordinate {i}"
            )));
        }
        let fd = (fp - fm) / (2.0 * h);
        let rel = (fd - analytic[i]).abs() / fd.abs().max(REL_ERROR_FLOOR);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn quadratic_gradient_passes() {
        let mut rng = Rng::seeded(5);
        let x: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let err = finite_diff_check(|p| p.iter().map(|v| v * v).sum(), &x, &analytic, 1e-5).unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn doubled_gradient_is_detected() {
        let x = vec![0.7, -1.3, 2.1];
        let wrong: Vec<f64> = x.iter().map(|v| 4.0 * v).collect(); // 2x the truth
        let err = finite_diff_check(|p| p.iter().map(|v| v * v).sum(), &x, &wrong, 1e-5).unwrap();
        assert!((err - 1.0).abs() < 1e-3, "err {err}");
    }

    #[test]
    fn constant_function_zero_gradient() {
        let x = vec![1.0, 2.0, 3.0];
        let err = finite_diff_check(|_| 42.0, &x, &[0.0, 0.0, 0.0], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(finite_diff_check(|_| 0.0, &[1.0], &[0.0, 0.0], 1e-5).is_err());
        assert!(finite_diff_check(|_| 0.0, &[1.0], &[0.0], 0.0).is_err());
        assert!(finite_diff_check(|_| f64::NAN, &[1.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn nonseparable_cubic_passes() {
        // f(x) = (x0*x1 + x2)^3 with its analytic gradient.
        let x = [0.4, -0.9, 0.3];
        let u = x[0] * x[1] + x[2];
        let g = [
            3.0 * u * u * x[1],
            3.0 * u * u * x[0],
            3.0 * u * u,
        ];
        let err = finite_diff_check(
            |p| {
                let u = p[0] * p[1] + p[2];
                u * u * u
            },
            &x,
            &g,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }
}
