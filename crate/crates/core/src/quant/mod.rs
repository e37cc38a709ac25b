//! Uniform affine quantization of weights and activations.

pub mod grid;
mod network;
mod params;

pub use params::{
    calibrate_minmax, check_bits, dequantize, fake_quant, is_bypass, quantize, Learnable,
    QuantParams, QuantizedTensor, BYPASS_BITS, MAX_BITS, MIN_BITS,
};
pub use network::{
    quantize_network, ActivationRanges, BitPlan, BlockQuant, BoundParam, ParamKind, QuantizedModel,
    QuantizedModelDocument, SiteDoc, SiteId, ACTIVATION_CALIBRATION_SAMPLES, ACTIVATION_SUB_BATCHES,
};
