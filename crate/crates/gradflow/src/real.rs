//! Scalar abstraction: everything in this crate is generic over a floating
//! point type implementing [`Real`].

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating point scalar: f32 or f64.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant into `Self`. Panics only if the type cannot
    /// represent any approximation of `x`, which cannot happen for f32/f64.
    #[inline]
    fn c(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).unwrap()
    }

    /// Lossy conversion to `f64`, for reporting and diagnostics.
    #[inline]
    fn as_f64(self) -> f64 {
        <Self as num_traits::ToPrimitive>::to_f64(&self).unwrap()
    }

    #[inline]
    fn half() -> Self {
        Self::c(0.5)
    }

    #[inline]
    fn two() -> Self {
        Self::c(2.0)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// RMS norm over a slice: sqrt(mean(x_i^2)). Zero for an empty slice.
pub fn rms<T: Real>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    let n = T::from_usize(xs.len()).unwrap();
    (xs.iter().map(|&x| x * x).sum::<T>() / n).sqrt()
}

/// Euclidean norm.
pub fn norm2<T: Real>(xs: &[T]) -> T {
    xs.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Dot product. Panics on length mismatch.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len(), "dot: length mismatch");
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// `y += alpha * x`, elementwise.
pub fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    assert_eq!(y.len(), x.len(), "axpy: length mismatch");
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Relative difference max |a-b| / max(1, |a|, |b|), elementwise maximum.
pub fn max_rel_err<T: Real>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len(), "max_rel_err: length mismatch");
    let mut worst = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let scale = T::one().max(x.abs()).max(y.abs());
        worst = worst.max((x - y).abs() / scale);
    }
    worst
}

pub fn all_finite<T: Real>(xs: &[T]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rms_matches_hand_value() {
        let v = [3.0f64, 4.0];
        assert!((rms(&v) - (12.5f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn generic_over_f32() {
        let v = [1.0f32, 1.0];
        assert!((rms(&v) - 1.0).abs() < 1e-6);
    }
}
