//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant, rounding to the nearest representable value.
    fn lit(x: f64) -> Self;

    /// Widens to `f64`. Exact for both `f32` and `f64`.
    fn to_f64_exact(self) -> f64;

    /// Rounds to the nearest integer, ties to even.
    fn round_half_even(self) -> Self {
        let r = self.round();
        if (self - self.trunc()).abs() == Self::lit(0.5) {
            // `round` resolved the tie away from zero; pull back if odd.
            let half = r / Self::lit(2.0);
            if half.trunc() != half {
                return r - self.signum();
            }
        }
        r
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64_exact(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64_exact(self) -> f64 {
        self as f64
    }
}
