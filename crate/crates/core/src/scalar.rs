//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the models and metrics are generic over.
///
/// Implemented for `f32` and `f64`. Training and gradient checks run in
/// `f64`; `f32` is the on-disk precision.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + LinalgScalar
    + ScalarOperand
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant into this scalar type.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal must be representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Rounds to `f32`, the precision used by every file format.
    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }

    #[inline]
    fn from_f32_exact(v: f32) -> Self {
        Self::from_f32(v).expect("f32 is representable in every supported scalar")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Numerically stable `log(sum(exp(v)))`. Returns `-inf` for an empty slice.
pub fn log_sum_exp<T: Real>(values: &[T]) -> T {
    let max = values
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    if !max.is_finite() {
        return max;
    }
    let sum: T = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_matches_naive_for_moderate_values() {
        let v = [0.3_f64, -1.2, 2.5, 0.0];
        let naive = v.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v) - naive).abs() < 1e-14);
    }

    #[test]
    fn lse_survives_large_negative_values() {
        let v = [-1000.0_f64, -1001.0];
        let got = log_sum_exp(&v);
        assert!(got.is_finite());
        assert!((got - (-1000.0 + (1.0 + (-1.0_f64).exp()).ln())).abs() < 1e-12);
    }

    #[test]
    fn lse_empty_is_neg_inf() {
        assert_eq!(log_sum_exp::<f32>(&[]), f32::NEG_INFINITY);
    }
}
