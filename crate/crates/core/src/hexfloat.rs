//! Exact text encoding of binary floating-point values (`0x1.8p+1` style).

use crate::error::{Error, Result};

/// Formats `x` as a C99-style hexadecimal float. Finite values only.
pub fn format(x: f64) -> String {
    assert!(x.is_finite(), "hex-float encoding of non-finite value");
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    let mant = bits & ((1u64 << 52) - 1);
    if exp_bits == 0 && mant == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if exp_bits == 0 {
        (0, -1022)
    } else {
        (1, exp_bits - 1023)
    };
    let mut digits = format!("{mant:013x}");
    while digits.ends_with('0') {
        digits.pop();
    }
    let frac = if digits.is_empty() {
        String::new()
    } else {
        format!(".{digits}")
    };
    format!("{sign}0x{lead}{frac}p{exp:+}")
}

/// `m * 2^e`, exact whenever the result is representable.
fn ldexp(mut m: f64, mut e: i64) -> f64 {
    while e > 1000 {
        m *= 2f64.powi(1000);
        e -= 1000;
    }
    while e < -1000 {
        m *= 2f64.powi(-1000);
        e += 1000;
    }
    m * 2f64.powi(e as i32)
}

/// Parses a hexadecimal float. Rejects values that would need rounding.
pub fn parse(s: &str) -> Result<f64> {
    let bad = |why: &str| Error::InvalidArgument(format!("bad hex float {s:?}: {why}"));
    let (neg, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let rest = rest
        .strip_prefix("0x")
        .or_else(|| rest.strip_prefix("0X"))
        .ok_or_else(|| bad("missing 0x prefix"))?;
    let (mantissa, exp) = rest
        .split_once(['p', 'P'])
        .ok_or_else(|| bad("missing binary exponent"))?;
    let exp: i64 = exp.parse().map_err(|_| bad("exponent is not an integer"))?;
    let (int_part, frac_part) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(bad("empty mantissa"));
    }
    let mut m: u64 = 0;
    for c in int_part.chars().chain(frac_part.chars()) {
        let d = c.to_digit(16).ok_or_else(|| bad("non-hex digit"))? as u64;
        m = m
            .checked_mul(16)
            .and_then(|v| v.checked_add(d))
            .ok_or_else(|| bad("mantissa too long"))?;
    }
    if m >= 1u64 << 53 {
        return Err(bad("mantissa exceeds 53 bits"));
    }
    let v = ldexp(m as f64, exp - 4 * frac_part.len() as i64);
    if !v.is_finite() || (m != 0 && v == 0.0) {
        return Err(bad("out of range"));
    }
    if m != 0 {
        // Round trip catches silent rounding in the subnormal range.
        let back = ldexp(v, 4 * frac_part.len() as i64 - exp);
        if back != m as f64 {
            return Err(bad("not exactly representable"));
        }
    }
    Ok(if neg { -v } else { v })
}
