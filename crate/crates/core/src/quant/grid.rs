//! Elementwise integer-grid rules shared by the quantizer and the tape.

use crate::scalar::Scalar;

/// Largest code of a `bits`-bit unsigned grid.
pub fn qmax<T: Scalar>(bits: u32) -> T {
    T::lit(((1u64 << bits) - 1) as f64)
}

/// Integer code for the pre-rounding value `u = x/s + z0`, before clamping.
///
/// Without an offset this is round-half-to-even. With an offset the code is
/// `floor(u + 0.5 + offset)`, so positive offsets push towards rounding up.
#[inline]
pub fn code<T: Scalar>(u: T, offset: Option<T>) -> T {
    match offset {
        Some(o) => (u + T::lit(0.5) + o).floor(),
        None => u.round_half_even(),
    }
}

#[inline]
pub fn clamp<T: Scalar>(code: T, qmax: T) -> T {
    code.max(T::zero()).min(qmax)
}
