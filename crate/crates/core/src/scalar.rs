//! Floating-point abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Real scalar the library is generic over: `f32` or `f64`.
///
/// `LinalgScalar` lets ndarray dispatch matrix products to the optimized
/// gemm kernels for both widths.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; every `f64` is representable as an `f32`
    /// up to rounding, so this never fails for the supported types.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize is representable in every Scalar")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable `log Σ exp(x_i)`; `-inf` for an empty slice.
pub fn logsumexp<T: Scalar>(xs: impl IntoIterator<Item = T> + Clone) -> T {
    let max = xs
        .clone()
        .into_iter()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    if !max.is_finite() {
        return max;
    }
    let s: T = xs.into_iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_matches_naive_for_small_values() {
        let xs = [0.1f64, -2.0, 3.5, 1.25];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((logsumexp(xs.iter().copied()) - naive).abs() < 1e-14);
    }

    #[test]
    fn logsumexp_survives_huge_exponents() {
        let xs = [1000.0f64, 1000.0];
        assert!((logsumexp(xs.iter().copied()) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let xs32 = [500.0f32, 499.0];
        assert!(logsumexp(xs32.iter().copied()).is_finite());
    }

    #[test]
    fn logsumexp_empty_is_neg_inf() {
        assert_eq!(logsumexp::<f64>(std::iter::empty()), f64::NEG_INFINITY);
    }
}
