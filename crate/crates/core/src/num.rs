//! Scalar abstraction for the numeric kernels.
//!
//! Feature extraction, clustering and topic inference are written against
//! [`Real`] so the same code runs in `f32` (the on-disk feature precision)
//! and `f64` (oracle tests, model fitting). Concrete aliases for common
//! instantiations live at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// Digamma ψ(x). Evaluated in f64 internally; exact for the f64 instantiation.
    fn digamma(self) -> Self {
        Self::from_f64_lossy(statrs::function::gamma::digamma(self.to_f64_lossy()))
    }

    /// Log-gamma ln Γ(x), evaluated in f64 internally. Named to avoid the
    /// pending `f64::ln_gamma` from std.
    fn log_gamma(self) -> Self {
        Self::from_f64_lossy(statrs::function::gamma::ln_gamma(self.to_f64_lossy()))
    }
}

impl Real for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digamma_matches_recurrence() {
        // psi(x+1) = psi(x) + 1/x
        for &x in &[0.3f64, 1.0, 2.5, 7.0] {
            let lhs = (x + 1.0).digamma();
            let rhs = x.digamma() + 1.0 / x;
            assert!((lhs - rhs).abs() < 1e-10, "x={x}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn log_gamma_known_values() {
        assert!((1.0f64.log_gamma()).abs() < 1e-12);
        assert!((5.0f64.log_gamma() - 24.0f64.ln()).abs() < 1e-10);
        let f32_val = 5.0f32.log_gamma();
        assert!((f32_val - 24.0f32.ln()).abs() < 1e-5);
    }
}
