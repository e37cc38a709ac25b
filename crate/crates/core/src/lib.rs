//! Pack-wise post-training quantization for block-structured networks.
//!
//! The pipeline scores every block by the mean diagonal of the loss Hessian
//! with respect to its output (estimated from Gaussian output perturbations),
//! groups consecutive blocks into packs by cutting at low-scoring blocks,
//! assigns per-pack weight bit-widths by solving a multiple-choice knapsack,
//! and finally reconstructs each pack's quantization parameters against its
//! full-precision counterpart.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the pipeline
//! and CLI run in `f64`, exposed through the `*64` aliases below.

pub mod allocation;
pub mod autodiff;
mod error;
pub mod eval;
pub mod finite_diff;
pub mod hexfloat;
pub mod importance;
pub mod model;
pub mod optim;
pub mod packing;
pub mod pipeline;
pub mod quant;
pub mod reconstruct;
mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Network64 = model::Network<f64>;
pub type Network32 = model::Network<f32>;
pub type QuantParams64 = quant::QuantParams<f64>;
