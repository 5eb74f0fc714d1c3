//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating-point element type: `f32` or `f64`.
///
/// Kernels accumulate in `f64` regardless of the element type, so the
/// trait carries lossless widening and a rounding narrow.
pub trait Scalar:
    Float + FromPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Element size in bytes.
    const BYTES: usize;

    fn to_acc(self) -> f64;
    fn from_acc(v: f64) -> Self;

    /// Literal constant.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_acc(v)
    }
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    #[inline(always)]
    fn to_acc(self) -> f64 {
        self as f64
    }

    #[inline(always)]
    fn from_acc(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    #[inline(always)]
    fn to_acc(self) -> f64 {
        self
    }

    #[inline(always)]
    fn from_acc(v: f64) -> Self {
        v
    }
}
