//! Scalar abstraction for the numeric pipeline.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar the numeric code is generic over: `f32` or `f64`.
///
/// `f64` is used wherever a tolerance tighter than single precision matters
/// (oracle comparisons, finite-difference checks); `f32` halves the memory
/// traffic during training.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Total conversion from `f64` (rounds for `f32`).
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Scalar")
    }

    /// Total conversion to `f64` (exact for both `f32` and `f64`).
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("every Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `log(exp(a) + exp(b))` without leaving log space.
pub fn log_add<F: Scalar>(a: F, b: F) -> F {
    if a == F::neg_infinity() {
        return b;
    }
    if b == F::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `log(sum(exp(xs)))` over a slice.
pub fn log_sum_exp<F: Scalar>(xs: &[F]) -> F {
    let hi = xs.iter().cloned().fold(F::neg_infinity(), F::max);
    if hi == F::neg_infinity() {
        return hi;
    }
    let sum = xs
        .iter()
        .map(|&x| (x - hi).exp())
        .fold(F::zero(), |acc, v| acc + v);
    hi + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_add_matches_linear() {
        let a: f64 = (0.3f64).ln();
        let b = (0.45f64).ln();
        assert!((log_add(a, b).exp() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn log_add_neg_infinity_identity() {
        assert_eq!(log_add(f64::NEG_INFINITY, -1.5), -1.5);
        assert_eq!(log_add(-1.5, f64::NEG_INFINITY), -1.5);
        assert_eq!(
            log_add(f64::NEG_INFINITY, f64::NEG_INFINITY),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn log_sum_exp_empty_and_single() {
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[-2.0f64]) - -2.0).abs() < 1e-15);
    }
}
