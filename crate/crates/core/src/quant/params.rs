//! Uniform affine quantization: `q = clamp(round(x/s + z0), 0, 2^k - 1)`,
//! `x_hat = s * (q - z0)`.

use serde::{Deserialize, Serialize};

use super::grid;
use crate::autodiff::channel_index;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;
/// Bit-width that disables quantization altogether.
pub const BYPASS_BITS: u32 = 32;

pub fn is_bypass(bits: u32) -> bool {
    bits >= BYPASS_BITS
}

pub fn check_bits(bits: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) || bits == BYPASS_BITS {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "bit-width {bits} not in {MIN_BITS}..={MAX_BITS} (or {BYPASS_BITS} for bypass)"
        )))
    }
}

/// Which quantization parameters an optimizer may update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Learnable {
    pub scale: bool,
    pub offsets: bool,
}

/// Scale, zero point and bit-width for one quantized tensor.
///
/// Per-tensor parameters hold a single scale and zero point; per-channel
/// parameters hold one per slice along `channel_axis`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams<T> {
    pub scales: Vec<T>,
    pub zero_points: Vec<T>,
    pub bits: u32,
    pub channel_axis: Option<usize>,
    /// Rounding offsets in `[-0.5, 0.5]`, one per element of the tensor.
    pub offsets: Option<Tensor<T>>,
    #[serde(default)]
    pub learnable: Learnable,
}

impl<T: Scalar> QuantParams<T> {
    pub fn per_tensor(scale: T, zero_point: T, bits: u32) -> Result<Self> {
        let p = QuantParams {
            scales: vec![scale],
            zero_points: vec![zero_point],
            bits,
            channel_axis: None,
            offsets: None,
            learnable: Learnable::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn per_channel(&self) -> bool {
        self.channel_axis.is_some()
    }

    pub fn qmax(&self) -> T {
        grid::qmax(self.bits)
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_BITS..=MAX_BITS).contains(&self.bits) {
            return Err(Error::InvalidArgument(format!(
                "quantizer bit-width {} outside {MIN_BITS}..={MAX_BITS}",
                self.bits
            )));
        }
        if self.scales.is_empty() || self.scales.len() != self.zero_points.len() {
            return Err(Error::InvalidArgument(format!(
                "{} scales vs {} zero points",
                self.scales.len(),
                self.zero_points.len()
            )));
        }
        if let Some(bad) = self.scales.iter().find(|s| !(s.is_finite() && **s > T::zero())) {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {bad}")));
        }
        if self.zero_points.iter().any(|z| !z.is_finite()) {
            return Err(Error::InvalidArgument("non-finite zero point".into()));
        }
        if let Some(off) = &self.offsets {
            let half = T::lit(0.5);
            if off.data().iter().any(|o| !(o.abs() <= half)) {
                return Err(Error::InvalidArgument("rounding offset outside [-0.5, 0.5]".into()));
            }
        }
        Ok(())
    }

    /// Channel of every element of `x` under these parameters.
    pub(crate) fn channels_for(&self, shape: &[usize]) -> Result<Vec<usize>> {
        channel_index(shape, self.channel_axis.unwrap_or(0), self.scales.len()).ok_or_else(|| {
            Error::shape(
                "quantize",
                format!("{} channels on axis {:?} of {shape:?}", self.scales.len(), self.channel_axis),
            )
        })
    }

    /// Clamps offsets back into `[-0.5, 0.5]`.
    pub fn clamp_offsets(&mut self) {
        if let Some(off) = &mut self.offsets {
            let half = T::lit(0.5);
            for o in off.data_mut() {
                *o = o.max(-half).min(half);
            }
        }
    }
}

/// Integer codes plus the parameters needed to map them back.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor<T> {
    pub ints: Vec<u32>,
    pub params: QuantParams<T>,
    pub shape: Vec<usize>,
}

/// MinMax calibration. `per_channel` selects the channel axis.
///
/// A constant tensor (or channel) gets `s = 1, z0 = -x`, so every value maps
/// to code 0 and dequantizes back to itself.
pub fn calibrate_minmax<T: Scalar>(
    x: &Tensor<T>,
    bits: u32,
    per_channel: Option<usize>,
) -> Result<QuantParams<T>> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("cannot calibrate an empty tensor".into()));
    }
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::InvalidArgument(format!("calibration bit-width {bits}")));
    }
    let channels = match per_channel {
        Some(axis) => *x.shape().get(axis).ok_or_else(|| {
            Error::InvalidArgument(format!("channel axis {axis} out of range for {:?}", x.shape()))
        })?,
        None => 1,
    };
    let chan = channel_index(x.shape(), per_channel.unwrap_or(0), channels)
        .expect("channel axis validated above");
    let mut lo = vec![T::infinity(); channels];
    let mut hi = vec![T::neg_infinity(); channels];
    for (&v, &c) in x.data().iter().zip(&chan) {
        lo[c] = lo[c].min(v);
        hi[c] = hi[c].max(v);
    }
    let (scales, zero_points) = minmax_to_affine(&lo, &hi, bits);
    let p = QuantParams {
        scales,
        zero_points,
        bits,
        channel_axis: per_channel,
        offsets: None,
        learnable: Learnable::default(),
    };
    p.validate()?;
    Ok(p)
}

/// Scale and zero point for observed ranges `[lo, hi]`.
pub(crate) fn minmax_to_affine<T: Scalar>(lo: &[T], hi: &[T], bits: u32) -> (Vec<T>, Vec<T>) {
    let qmax: T = grid::qmax(bits);
    lo.iter()
        .zip(hi)
        .map(|(&l, &h)| {
            if h > l {
                let s = (h - l) / qmax;
                (s, -l / s)
            } else {
                (T::one(), -l)
            }
        })
        .unzip()
}

pub fn quantize<T: Scalar>(x: &Tensor<T>, params: &QuantParams<T>) -> Result<QuantizedTensor<T>> {
    params.validate()?;
    let chan = params.channels_for(x.shape())?;
    let qmax = params.qmax();
    let ints = x
        .data()
        .iter()
        .zip(&chan)
        .map(|(&v, &c)| {
            let u = v / params.scales[c] + params.zero_points[c];
            grid::clamp(grid::code(u, None), qmax)
                .to_u32()
                .expect("clamped code fits u32")
        })
        .collect();
    Ok(QuantizedTensor {
        ints,
        params: params.clone(),
        shape: x.shape().to_vec(),
    })
}

pub fn dequantize<T: Scalar>(q: &QuantizedTensor<T>) -> Result<Tensor<T>> {
    let chan = q.params.channels_for(&q.shape)?;
    let data = q
        .ints
        .iter()
        .zip(&chan)
        .map(|(&i, &c)| q.params.scales[c] * (T::lit(i as f64) - q.params.zero_points[c]))
        .collect();
    Tensor::new(q.shape.clone(), data)
}

/// Quantize-dequantize in one pass, honouring rounding offsets when present.
pub fn fake_quant<T: Scalar>(x: &Tensor<T>, params: &QuantParams<T>) -> Result<Tensor<T>> {
    params.validate()?;
    let chan = params.channels_for(x.shape())?;
    if let Some(off) = &params.offsets {
        if off.shape() != x.shape() {
            return Err(Error::shape(
                "fake_quant",
                format!("offsets {:?} vs x {:?}", off.shape(), x.shape()),
            ));
        }
    }
    let qmax = params.qmax();
    let off = params.offsets.as_ref().map(|o| o.data());
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = chan[i];
            let (s, z0) = (params.scales[c], params.zero_points[c]);
            let code = grid::code(v / s + z0, off.map(|o| o[i]));
            s * (grid::clamp(code, qmax) - z0)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}
