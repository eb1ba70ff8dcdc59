//! Minimal dense linear algebra, seeded RNG, Adam, and a gradient checker.
//!
//! Everything downstream (quantizer, decoder, losses, QP) computes in f64;
//! f32 appears only at file boundaries. All routines here are deterministic:
//! fixed accumulation order, no platform-dependent intrinsics, and an
//! explicitly seeded generator.

mod adam;
mod gradcheck;
mod matrix;
mod rng;

pub use adam::{AdamParams, AdamState};
pub use gradcheck::{finite_diff_check, REL_ERROR_FLOOR};
pub use matrix::{dist, dot, squared_dist, Matrix};
pub use rng::{derive_seed, Rng};
