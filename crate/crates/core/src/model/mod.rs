//! Block-structured networks: `head(B_n(...B_1(stem(x))))`.
//!
//! Every forward pass goes through an autodiff [`Graph`], so the same code
//! serves evaluation, training, per-block capture and quantized execution.

mod data;
pub(crate) mod io;
mod train;
mod zoo;

pub use data::{generate_dataset, CalibrationSet, DatasetKind, DatasetSplit};
pub use io::{deserialize, serialize, ModelDocument};
pub use train::{train, TrainConfig, TrainReport};
pub use zoo::{build_model, ArchSpec, REGISTERED_ARCHS};


use serde::{Deserialize, Serialize};

use crate::autodiff::{FakeQuantSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One primitive stage of a block, stem or head.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    /// `y = x W + b` with `W` stored as `[in, out]`.
    Linear {
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    },
    /// Kernel `[out, in, kh, kw]`, stride 1, "same" zero padding.
    Conv2d {
        kernel: Tensor<T>,
        bias: Option<Tensor<T>>,
    },
    Gelu,
    Relu,
    /// Reshape every sample to `shape` (batch axis kept).
    Reshape { shape: Vec<usize> },
}

impl<T: Scalar> Layer<T> {
    pub fn weight(&self) -> Option<&Tensor<T>> {
        match self {
            Layer::Linear { weight, .. } => Some(weight),
            Layer::Conv2d { kernel, .. } => Some(kernel),
            _ => None,
        }
    }

    pub fn weight_mut(&mut self) -> Option<&mut Tensor<T>> {
        match self {
            Layer::Linear { weight, .. } => Some(weight),
            Layer::Conv2d { kernel, .. } => Some(kernel),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor<T>> {
        match self {
            Layer::Linear { bias, .. } | Layer::Conv2d { bias, .. } => bias.as_ref(),
            _ => None,
        }
    }

    pub fn bias_mut(&mut self) -> Option<&mut Tensor<T>> {
        match self {
            Layer::Linear { bias, .. } | Layer::Conv2d { bias, .. } => bias.as_mut(),
            _ => None,
        }
    }

    /// Axis of the weight tensor that indexes output channels.
    pub fn output_channel_axis(&self) -> Option<usize> {
        match self {
            Layer::Linear { .. } => Some(1),
            Layer::Conv2d { .. } => Some(0),
            _ => None,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.weight().map_or(0, Tensor::len)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Linear { .. } => "linear",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Gelu => "gelu",
            Layer::Relu => "relu",
            Layer::Reshape { .. } => "reshape",
        }
    }

    fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ctx: &mut ForwardCtx<T>,
        weight_quant: Option<&SiteVars<T>>,
    ) -> Result<Var> {
        match self {
            Layer::Linear { weight, bias } | Layer::Conv2d { kernel: weight, bias } => {
                let mut w = ctx.bind(g, weight);
                if let Some(q) = weight_quant {
                    w = q.apply(g, w)?;
                }
                let mut y = if matches!(self, Layer::Linear { .. }) {
                    g.matmul(x, w)?
                } else {
                    g.conv2d(x, w)?
                };
                if let Some(b) = bias {
                    let b = ctx.bind(g, b);
                    y = g.bias_add(y, b)?;
                }
                Ok(y)
            }
            Layer::Gelu => g.gelu(x),
            Layer::Relu => g.relu(x),
            Layer::Reshape { shape } => {
                let n = g.value(x).shape()[0];
                let mut full = vec![n];
                full.extend_from_slice(shape);
                g.reshape(x, &full)
            }
        }
    }
}

/// A residual unit: the granule that packing groups and reconstruction
/// optimizes.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    /// 1-based position in the network.
    pub index: usize,
    pub layers: Vec<Layer<T>>,
    /// Adds the block input to the output of `layers`.
    pub residual: bool,
}

impl<T: Scalar> Block<T> {
    /// Number of quantizable weight scalars (biases excluded).
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::weight_count).sum()
    }

    pub(crate) fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ctx: &mut ForwardCtx<T>,
        quant: Option<&BlockSiteVars<T>>,
    ) -> Result<Var> {
        let x = match quant.and_then(|q| q.input.as_ref()) {
            Some(q) => q.apply(g, x)?,
            None => x,
        };
        let mut h = x;
        for (li, layer) in self.layers.iter().enumerate() {
            let wq = quant.and_then(|q| q.weights.get(li)).and_then(Option::as_ref);
            h = layer.forward(g, h, ctx, wq)?;
        }
        if self.residual {
            h = g.add(h, x).map_err(|e| match e {
                Error::Shape { detail, .. } => Error::shape("residual add", format!("block {}: {detail}", self.index)),
                other => other,
            })?;
        }
        Ok(h)
    }
}

/// Task loss applied to the head output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskLoss {
    /// Softmax cross-entropy against integer labels.
    #[default]
    CrossEntropy,
    /// `0.5 * ||head(z)||^2` per sample; labels are ignored.
    HalfSquaredNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub name: String,
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub stem: Vec<Layer<T>>,
    pub blocks: Vec<Block<T>>,
    pub head: Vec<Layer<T>>,
    pub loss: TaskLoss,
}

/// Graph-side fake-quantization parameters for one site.
#[derive(Clone, Debug)]
pub struct SiteVars<T> {
    pub scale: Var,
    pub offsets: Option<Var>,
    pub spec: FakeQuantSpec<T>,
}

impl<T: Scalar> SiteVars<T> {
    pub(crate) fn apply(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.fake_quant(x, self.scale, self.offsets, &self.spec)
    }
}

#[derive(Clone, Debug, Default)]
pub struct BlockSiteVars<T> {
    pub input: Option<SiteVars<T>>,
    /// Indexed like `Block::layers`; `None` for parameter-free layers.
    pub weights: Vec<Option<SiteVars<T>>>,
}

/// Quantization sites for a whole forward pass.
#[derive(Clone, Debug, Default)]
pub struct NetworkSiteVars<T> {
    pub stem: Vec<Option<SiteVars<T>>>,
    pub blocks: Vec<Option<BlockSiteVars<T>>>,
    pub head: Vec<Option<SiteVars<T>>>,
}

/// Per-pass state: whether parameters are trainable leaves, the leaves bound
/// so far (in traversal order), and an optional additive injection.
pub struct ForwardCtx<T> {
    trainable: bool,
    pub bound: Vec<Var>,
    /// Added to the output of the 0-based block index.
    pub inject: Option<(usize, Tensor<T>)>,
}

impl<T: Scalar> ForwardCtx<T> {
    pub fn frozen() -> Self {
        ForwardCtx {
            trainable: false,
            bound: Vec::new(),
            inject: None,
        }
    }

    pub fn trainable() -> Self {
        ForwardCtx {
            trainable: true,
            bound: Vec::new(),
            inject: None,
        }
    }

    fn bind(&mut self, g: &mut Graph<T>, t: &Tensor<T>) -> Var {
        if self.trainable {
            let v = g.param(t.clone());
            self.bound.push(v);
            v
        } else {
            g.constant(t.clone())
        }
    }
}

/// Vars produced by one graph forward pass.
pub struct ForwardVars {
    pub block_outputs: Vec<Var>,
    pub logits: Var,
}

/// Value snapshot of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptureRecord<T> {
    /// Output of each block, in block order.
    pub block_outputs: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
    /// Batch-mean task loss.
    pub loss: T,
}

impl<T: Scalar> Network<T> {
    pub fn new(
        name: impl Into<String>,
        input_shape: Vec<usize>,
        class_count: usize,
        stem: Vec<Layer<T>>,
        blocks: Vec<Block<T>>,
        head: Vec<Layer<T>>,
    ) -> Result<Self> {
        let net = Network {
            name: name.into(),
            input_shape,
            class_count,
            stem,
            blocks,
            head,
            loss: TaskLoss::CrossEntropy,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn with_loss(mut self, loss: TaskLoss) -> Self {
        self.loss = loss;
        self
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn param_counts(&self) -> Vec<usize> {
        self.blocks.iter().map(Block::param_count).collect()
    }

    /// Checks structure and runs a single zero sample end to end, which
    /// catches incompatible adjacent shapes.
    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "network needs at least 2 blocks, has {}",
                self.blocks.len()
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.index != i + 1 {
                return Err(Error::InvalidArgument(format!(
                    "block at position {} carries index {}",
                    i + 1,
                    b.index
                )));
            }
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad input shape {:?}", self.input_shape)));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(&self.input_shape);
        let x = Tensor::zeros(&shape);
        let logits = self.logits(&x)?;
        if self.loss == TaskLoss::CrossEntropy && logits.shape() != [1, self.class_count] {
            return Err(Error::shape(
                "head",
                format!("logits {:?} but class_count {}", logits.shape(), self.class_count),
            ));
        }
        Ok(())
    }

    fn check_batch(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(
                "network input",
                format!("batch {:?} vs per-sample input {:?}", x.shape(), self.input_shape),
            ));
        }
        Ok(())
    }

    /// Full forward on the graph.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ctx: &mut ForwardCtx<T>,
        quant: Option<&NetworkSiteVars<T>>,
    ) -> Result<ForwardVars> {
        let mut h = x;
        for (li, layer) in self.stem.iter().enumerate() {
            let wq = quant.and_then(|q| q.stem.get(li)).and_then(Option::as_ref);
            h = layer.forward(g, h, ctx, wq)?;
        }
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        for (bi, block) in self.blocks.iter().enumerate() {
            let bq = quant.and_then(|q| q.blocks.get(bi)).and_then(Option::as_ref);
            h = block.forward(g, h, ctx, bq)?;
            if let Some((at, delta)) = &ctx.inject {
                if *at == bi {
                    let d = g.constant(delta.clone());
                    h = g.add(h, d)?;
                }
            }
            block_outputs.push(h);
        }
        let logits = self.head_forward(g, h, ctx, quant)?;
        Ok(ForwardVars {
            block_outputs,
            logits,
        })
    }

    fn head_forward(
        &self,
        g: &mut Graph<T>,
        mut h: Var,
        ctx: &mut ForwardCtx<T>,
        quant: Option<&NetworkSiteVars<T>>,
    ) -> Result<Var> {
        for (li, layer) in self.head.iter().enumerate() {
            let wq = quant.and_then(|q| q.head.get(li)).and_then(Option::as_ref);
            h = layer.forward(g, h, ctx, wq)?;
        }
        Ok(h)
    }

    /// Runs the 0-based blocks `start..end` on `x`.
    pub fn forward_blocks(
        &self,
        g: &mut Graph<T>,
        x: Var,
        range: std::ops::Range<usize>,
        ctx: &mut ForwardCtx<T>,
        quant: Option<&NetworkSiteVars<T>>,
    ) -> Result<Var> {
        let mut h = x;
        for bi in range {
            let bq = quant.and_then(|q| q.blocks.get(bi)).and_then(Option::as_ref);
            h = self.blocks[bi].forward(g, h, ctx, bq)?;
        }
        Ok(h)
    }

    /// Logits of the network continued from the output of 0-based block `t`:
    /// runs blocks `t+1..n` and the head.
    pub fn forward_from_block(
        &self,
        g: &mut Graph<T>,
        t: usize,
        z: Var,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<Var> {
        if t >= self.blocks.len() {
            return Err(Error::InvalidArgument(format!(
                "block index {} out of range 1..={}",
                t + 1,
                self.blocks.len()
            )));
        }
        let h = self.forward_blocks(g, z, t + 1..self.blocks.len(), ctx, None)?;
        self.head_forward(g, h, ctx, None)
    }

    /// Stem only.
    pub fn stem_forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ctx: &mut ForwardCtx<T>,
        quant: Option<&NetworkSiteVars<T>>,
    ) -> Result<Var> {
        let mut h = x;
        for (li, layer) in self.stem.iter().enumerate() {
            let wq = quant.and_then(|q| q.stem.get(li)).and_then(Option::as_ref);
            h = layer.forward(g, h, ctx, wq)?;
        }
        Ok(h)
    }

    /// Per-sample task loss `[n]`.
    pub fn per_sample_loss(&self, g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
        match self.loss {
            TaskLoss::CrossEntropy => g.cross_entropy(logits, labels),
            TaskLoss::HalfSquaredNorm => {
                let sq = g.mul(logits, logits)?;
                let s = g.sum_rows(sq)?;
                g.scale(s, T::lit(0.5))
            }
        }
    }

    /// Batch-mean task loss.
    pub fn task_loss(&self, g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
        let per = self.per_sample_loss(g, logits, labels)?;
        g.mean(per)
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&mut g, xv, &mut ForwardCtx::frozen(), None)?;
        Ok(g.value(out.logits).clone())
    }

    /// Logits with `delta` added to the output of 0-based block `t`.
    pub fn logits_with_injection(&self, x: &Tensor<T>, t: usize, delta: Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut ctx = ForwardCtx::frozen();
        ctx.inject = Some((t, delta));
        let out = self.forward_graph(&mut g, xv, &mut ctx, None)?;
        Ok(g.value(out.logits).clone())
    }

    /// Forward pass that snapshots every block output, the logits and the
    /// batch-mean loss.
    pub fn forward_capture(&self, x: &Tensor<T>, labels: &[usize]) -> Result<CaptureRecord<T>> {
        self.check_batch(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&mut g, xv, &mut ForwardCtx::frozen(), None)?;
        let loss = self.task_loss(&mut g, out.logits, labels)?;
        Ok(CaptureRecord {
            block_outputs: out.block_outputs.iter().map(|&v| g.value(v).clone()).collect(),
            logits: g.value(out.logits).clone(),
            loss: g.value(loss).item()?,
        })
    }

    /// Every weight and bias tensor in forward traversal order, matching the
    /// order in which a trainable [`ForwardCtx`] binds them.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        let layers = self
            .stem
            .iter_mut()
            .chain(self.blocks.iter_mut().flat_map(|b| b.layers.iter_mut()))
            .chain(self.head.iter_mut());
        for layer in layers {
            match layer {
                Layer::Linear { weight, bias } | Layer::Conv2d { kernel: weight, bias } => {
                    out.push(weight);
                    if let Some(b) = bias {
                        out.push(b);
                    }
                }
                _ => {}
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(zero_inner: bool) -> Network<f64> {
        let mut net: Network<f64> = build_model(&ArchSpec::new("resmlp-4x16", 2, 3), 1).unwrap();
        if zero_inner {
            for b in &mut net.blocks {
                for l in &mut b.layers {
                    if let Some(w) = l.weight_mut() {
                        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
                    }
                    if let Some(bias) = l.bias_mut() {
                        bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
        }
        net
    }

    fn batch() -> Tensor<f64> {
        Tensor::from_f64(&[3, 2], &[0.1, -0.4, 1.2, 0.7, -2.0, 0.3]).unwrap()
    }

    #[test]
    fn residual_identity() {
        let net = tiny(true);
        let cap = net.forward_capture(&batch(), &[0, 1, 2]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(batch());
        let stem = net.stem_forward(&mut g, x, &mut ForwardCtx::frozen(), None).unwrap();
        assert_eq!(cap.block_outputs.len(), 4);
        for z in &cap.block_outputs {
            assert_eq!(z, g.value(stem));
        }
    }

    #[test]
    fn capture_is_reproducible_and_matches_logits() {
        let net = tiny(false);
        let a = net.forward_capture(&batch(), &[0, 1, 2]).unwrap();
        let b = net.forward_capture(&batch(), &[0, 1, 2]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.logits, net.logits(&batch()).unwrap());
    }

    #[test]
    fn continuing_from_perturbed_capture_matches_injection() {
        let net = tiny(false);
        let x = batch();
        let cap = net.forward_capture(&x, &[0, 1, 2]).unwrap();
        let t = 2; // block 3
        let delta = cap.block_outputs[t].map(|v| 0.01 * v.sin() + 0.003);
        let hooked = net.logits_with_injection(&x, t, delta.clone()).unwrap();

        let mut g = Graph::new();
        let z = g.constant(cap.block_outputs[t].clone());
        let d = g.constant(delta);
        let zp = g.add(z, d).unwrap();
        let logits = net.forward_from_block(&mut g, t, zp, &mut ForwardCtx::frozen()).unwrap();
        assert_eq!(g.value(logits), &hooked);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let net = tiny(false);
        let bad = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(net.logits(&bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_input_gives_finite_logits() {
        let net: Network<f64> = build_model(&ArchSpec::new("resmlp-2x8", 2, 4), 3).unwrap();
        let logits = net.logits(&Tensor::zeros(&[1, 2])).unwrap();
        assert!(logits.all_finite());
    }
}
