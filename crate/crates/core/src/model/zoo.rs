//! Registered toy architectures.
//!
//! * `resmlp-<n>x<w>`: linear stem to width `w`, `n` residual blocks
//!   `Linear -> GELU -> Linear` (+ skip), linear head.
//! * `convnet-<n>`: linear stem reshaped to a `4x4x4` feature map, `n`
//!   residual blocks `Conv3x3 -> ReLU -> Conv3x3` (+ skip), flatten + linear head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Block, Layer, Network};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const REGISTERED_ARCHS: &[&str] = &["resmlp-<blocks>x<width>", "convnet-<blocks>"];

const CONV_CHANNELS: usize = 4;
const CONV_SIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub input_dim: usize,
    pub class_count: usize,
}

impl ArchSpec {
    pub fn new(name: &str, input_dim: usize, class_count: usize) -> Self {
        ArchSpec {
            name: name.to_string(),
            input_dim,
            class_count,
        }
    }
}

enum Arch {
    ResMlp { blocks: usize, width: usize },
    ConvNet { blocks: usize },
}

fn parse(name: &str) -> Option<Arch> {
    if let Some(rest) = name.strip_prefix("resmlp-") {
        let (b, w) = rest.split_once('x')?;
        return Some(Arch::ResMlp {
            blocks: b.parse().ok()?,
            width: w.parse().ok()?,
        });
    }
    if let Some(rest) = name.strip_prefix("convnet-") {
        return Some(Arch::ConvNet {
            blocks: rest.parse().ok()?,
        });
    }
    None
}

fn unknown(name: &str) -> Error {
    Error::InvalidArgument(format!(
        "unknown architecture {name:?}; registered: {} (e.g. resmlp-8x32, resmlp-4x16, convnet-6)",
        REGISTERED_ARCHS.join(", ")
    ))
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn linear<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> Layer<T> {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Layer::Linear {
        weight: uniform(rng, &[fan_in, fan_out], bound),
        bias: Some(Tensor::zeros(&[fan_out])),
    }
}

fn conv<T: Scalar>(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, gain: f64) -> Layer<T> {
    let bound = gain * (3.0 / (c_in * 9) as f64).sqrt();
    Layer::Conv2d {
        kernel: uniform(rng, &[c_out, c_in, 3, 3], bound),
        bias: Some(Tensor::zeros(&[c_out])),
    }
}

/// Builds a randomly initialised network for a registered architecture.
pub fn build_model<T: Scalar>(spec: &ArchSpec, seed: u64) -> Result<Network<T>> {
    let arch = parse(&spec.name).ok_or_else(|| unknown(&spec.name))?;
    if spec.input_dim == 0 || spec.class_count < 2 {
        return Err(Error::InvalidArgument(format!(
            "input_dim {} / class_count {} invalid",
            spec.input_dim, spec.class_count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (stem, blocks, head) = match arch {
        Arch::ResMlp { blocks, width } => {
            if blocks < 2 || width == 0 {
                return Err(unknown(&spec.name));
            }
            let stem = vec![linear(&mut rng, spec.input_dim, width, 1.0)];
            let blocks = (0..blocks)
                .map(|i| Block {
                    index: i + 1,
                    layers: vec![
                        linear(&mut rng, width, width, 1.0),
                        Layer::Gelu,
                        linear(&mut rng, width, width, 0.5),
                    ],
                    residual: true,
                })
                .collect();
            let head = vec![linear(&mut rng, width, spec.class_count, 1.0)];
            (stem, blocks, head)
        }
        Arch::ConvNet { blocks } => {
            if blocks < 2 {
                return Err(unknown(&spec.name));
            }
            let feat = CONV_CHANNELS * CONV_SIDE * CONV_SIDE;
            let stem = vec![
                linear(&mut rng, spec.input_dim, feat, 1.0),
                Layer::Reshape {
                    shape: vec![CONV_CHANNELS, CONV_SIDE, CONV_SIDE],
                },
            ];
            let blocks = (0..blocks)
                .map(|i| Block {
                    index: i + 1,
                    layers: vec![
                        conv(&mut rng, CONV_CHANNELS, CONV_CHANNELS, 1.0),
                        Layer::Relu,
                        conv(&mut rng, CONV_CHANNELS, CONV_CHANNELS, 0.5),
                    ],
                    residual: true,
                })
                .collect();
            let head = vec![
                Layer::Reshape { shape: vec![feat] },
                linear(&mut rng, feat, spec.class_count, 1.0),
            ];
            (stem, blocks, head)
        }
    };
    Network::new(spec.name.clone(), vec![spec.input_dim], spec.class_count, stem, blocks, head)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resmlp_param_counts() {
        let net: Network<f64> = build_model(&ArchSpec::new("resmlp-4x16", 2, 3), 0).unwrap();
        assert_eq!(net.block_count(), 4);
        // two 16x16 weight matrices per block, biases excluded
        assert_eq!(net.param_counts(), vec![512; 4]);
    }

    #[test]
    fn convnet_structure() {
        let net: Network<f64> = build_model(&ArchSpec::new("convnet-6", 2, 4), 0).unwrap();
        assert_eq!(net.block_count(), 6);
        assert_eq!(net.param_counts(), vec![2 * 4 * 4 * 9; 6]);
        let logits = net.logits(&Tensor::full(&[3, 2], 0.5)).unwrap();
        assert_eq!(logits.shape(), &[3, 4]);
    }

    #[test]
    fn unknown_arch_lists_registry() {
        let err = build_model::<f64>(&ArchSpec::new("transformer-3", 2, 3), 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("resmlp-<blocks>x<width>") && msg.contains("convnet"), "{msg}");
        assert!(build_model::<f64>(&ArchSpec::new("resmlp-1x8", 2, 3), 0).is_err());
    }

    #[test]
    fn f32_networks_build() {
        let net: Network<f32> = build_model(&ArchSpec::new("resmlp-2x8", 2, 3), 5).unwrap();
        assert!(net.logits(&Tensor::zeros(&[1, 2])).unwrap().all_finite());
    }
}
