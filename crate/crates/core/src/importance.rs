//! Block importance scores from Gaussian perturbations of block outputs.
//!
//! For a loss `L` seen as a function of a block output `z`, and
//! `dz ~ N(0, sigma^2 I)`,
//!
//! ```text
//! E[2 (L(z + dz) - L(z) - dz . g)] / E[dz . dz]  ->  tr(H) / n
//! ```
//!
//! where `g` and `H` are the gradient and Hessian of `L` at `z` and `n` is the
//! dimension of `z`. The score of a block is this ratio, averaged jointly over
//! calibration items and noise draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{CalibrationSet, CaptureRecord, ForwardCtx, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest `z` dimension the finite-difference oracle accepts.
pub const ORACLE_MAX_DIM: usize = 512;

const MIN_DENOMINATOR: f64 = 1e-30;

/// A loss surface that can be probed around per-item base points.
pub trait PerturbationTarget<T: Scalar>: Sync {
    /// Number of independent base points.
    fn items(&self) -> usize;
    /// Dimension of each base point.
    fn dim(&self) -> usize;
    fn base(&self, item: usize) -> &[T];
    fn base_loss(&self, item: usize) -> T;
    fn gradient(&self, item: usize) -> &[T];
    /// Loss at `base(item) + delta` for each of the `deltas.len() / dim()`
    /// row-major perturbations.
    fn losses(&self, item: usize, deltas: &[T]) -> Result<Vec<T>>;
}

/// `L(z) = 0.5 z^T A z + c^T z` around a single point.
#[derive(Clone, Debug)]
pub struct QuadraticForm<T> {
    n: usize,
    a: Vec<T>,
    c: Vec<T>,
    z: Vec<T>,
    loss: T,
    grad: Vec<T>,
}

impl<T: Scalar> QuadraticForm<T> {
    /// `a` is `n x n` row-major.
    pub fn new(a: Vec<T>, c: Vec<T>, z: Vec<T>) -> Result<Self> {
        let n = z.len();
        if n == 0 || a.len() != n * n || c.len() != n {
            return Err(Error::shape(
                "quadratic form",
                format!("A has {} entries, c {}, z {}", a.len(), c.len(), n),
            ));
        }
        let mut q = QuadraticForm {
            n,
            a,
            c,
            z,
            loss: T::zero(),
            grad: Vec::new(),
        };
        q.loss = q.eval(&q.z);
        q.grad = (0..n)
            .map(|i| {
                let row = &q.a[i * n..(i + 1) * n];
                row.iter().zip(&q.z).map(|(&a, &z)| a * z).sum::<T>() + q.c[i]
            })
            .collect();
        Ok(q)
    }

    fn eval(&self, z: &[T]) -> T {
        let n = self.n;
        let mut quad = T::zero();
        for i in 0..n {
            let row = &self.a[i * n..(i + 1) * n];
            quad += z[i] * row.iter().zip(z).map(|(&a, &zj)| a * zj).sum::<T>();
        }
        T::lit(0.5) * quad + self.c.iter().zip(z).map(|(&c, &zi)| c * zi).sum::<T>()
    }

    /// `tr(A) / n`.
    pub fn hessian_mean(&self) -> T {
        (0..self.n).map(|i| self.a[i * self.n + i]).sum::<T>() / T::lit(self.n as f64)
    }
}

impl<T: Scalar> PerturbationTarget<T> for QuadraticForm<T> {
    fn items(&self) -> usize {
        1
    }

    fn dim(&self) -> usize {
        self.n
    }

    fn base(&self, _item: usize) -> &[T] {
        &self.z
    }

    fn base_loss(&self, _item: usize) -> T {
        self.loss
    }

    fn gradient(&self, _item: usize) -> &[T] {
        &self.grad
    }

    fn losses(&self, _item: usize, deltas: &[T]) -> Result<Vec<T>> {
        Ok(deltas
            .chunks(self.n)
            .map(|d| {
                let p: Vec<T> = self.z.iter().zip(d).map(|(&z, &d)| z + d).collect();
                self.eval(&p)
            })
            .collect())
    }
}

/// Per-sample task loss of a network as a function of the output of one
/// block, for a fixed set of calibration items.
pub struct BlockTarget<'a, T> {
    network: &'a Network<T>,
    /// 0-based block.
    t: usize,
    z: Tensor<T>,
    labels: Vec<usize>,
    losses: Vec<T>,
    grads: Tensor<T>,
}

impl<'a, T: Scalar> BlockTarget<'a, T> {
    /// Captures block `t` (0-based) outputs for `inputs` on the
    /// full-precision network and the per-item loss gradients there.
    pub fn new(network: &'a Network<T>, inputs: &Tensor<T>, labels: &[usize], t: usize) -> Result<Self> {
        check_block(network, t)?;
        let mut g = Graph::new();
        let xv = g.constant(inputs.clone());
        let mut ctx = ForwardCtx::frozen();
        let h = network.stem_forward(&mut g, xv, &mut ctx, None)?;
        let z = network.forward_blocks(&mut g, h, 0..t + 1, &mut ctx, None)?;
        let z = g.value(z).clone();
        Self::from_output(network, z, labels, t)
    }

    /// Uses an already captured block output `z` (batch-major).
    pub fn from_output(network: &'a Network<T>, z: Tensor<T>, labels: &[usize], t: usize) -> Result<Self> {
        check_block(network, t)?;
        if z.shape()[0] != labels.len() {
            return Err(Error::shape(
                "block target",
                format!("{} outputs vs {} labels", z.shape()[0], labels.len()),
            ));
        }
        let mut g = Graph::new();
        let zv = g.leaf(z.clone().with_grad(true));
        let logits = network.forward_from_block(&mut g, t, zv, &mut ForwardCtx::frozen())?;
        let per = network.per_sample_loss(&mut g, logits, labels)?;
        let total = g.sum(per)?;
        let grads = g.backward(total)?.wrt(zv)?.clone();
        let losses = g.value(per).data().to_vec();
        Ok(BlockTarget {
            network,
            t,
            z,
            labels: labels.to_vec(),
            losses,
            grads,
        })
    }

    /// RMS of the captured outputs.
    pub fn output_rms(&self) -> T {
        let d = self.z.data();
        (d.iter().map(|&v| v * v).sum::<T>() / T::lit(d.len() as f64)).sqrt()
    }
}

fn check_block<T: Scalar>(network: &Network<T>, t: usize) -> Result<()> {
    if t >= network.block_count() {
        return Err(Error::InvalidArgument(format!(
            "block index {} out of range 1..={}",
            t + 1,
            network.block_count()
        )));
    }
    Ok(())
}

impl<T: Scalar> PerturbationTarget<T> for BlockTarget<'_, T> {
    fn items(&self) -> usize {
        self.labels.len()
    }

    fn dim(&self) -> usize {
        self.z.row_len()
    }

    fn base(&self, item: usize) -> &[T] {
        self.z.row(item)
    }

    fn base_loss(&self, item: usize) -> T {
        self.losses[item]
    }

    fn gradient(&self, item: usize) -> &[T] {
        self.grads.row(item)
    }

    fn losses(&self, item: usize, deltas: &[T]) -> Result<Vec<T>> {
        let dim = self.dim();
        let count = deltas.len() / dim;
        let base = self.z.row(item);
        let data: Vec<T> = deltas
            .chunks(dim)
            .flat_map(|d| base.iter().zip(d).map(|(&z, &d)| z + d))
            .collect();
        let mut shape = self.z.shape().to_vec();
        shape[0] = count;
        let mut g = Graph::new();
        let zv = g.constant(Tensor::new(shape, data)?);
        let logits = self
            .network
            .forward_from_block(&mut g, self.t, zv, &mut ForwardCtx::frozen())?;
        let per = self
            .network
            .per_sample_loss(&mut g, logits, &vec![self.labels[item]; count])?;
        Ok(g.value(per).data().to_vec())
    }
}

/// How the perturbation standard deviation is chosen per block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum SigmaPolicy {
    /// `sigma = factor * RMS(z)`.
    RelativeRms(f64),
    Absolute(f64),
}

impl Default for SigmaPolicy {
    fn default() -> Self {
        SigmaPolicy::RelativeRms(0.01)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationConfig {
    pub sigma: SigmaPolicy,
    /// Total perturbations per block, split evenly over the items.
    pub num_samples: usize,
    /// Calibration items averaged over.
    pub items: usize,
    pub seed: u64,
    /// Perturbations evaluated per forward batch; each chunk has its own
    /// random stream.
    pub chunk: usize,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            sigma: SigmaPolicy::default(),
            num_samples: 4096,
            items: 16,
            seed: 0,
            chunk: 64,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        let sigma = match self.sigma {
            SigmaPolicy::RelativeRms(v) | SigmaPolicy::Absolute(v) => v,
        };
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
        }
        if self.num_samples == 0 || self.items == 0 || self.chunk == 0 {
            return Err(Error::InvalidArgument(
                "num_samples, items and chunk must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Estimate for one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockScore {
    /// 1-based block index.
    pub block: usize,
    pub score: f64,
    /// Mean of `2 (L(z + dz) - L(z) - dz . g)`.
    pub numerator: f64,
    /// Mean of `dz . dz`.
    pub denominator: f64,
    /// Standard error of `numerator`.
    pub stderr: f64,
    /// Delta-method standard error of `score`.
    pub score_stderr: f64,
    /// Dimension of the block output.
    pub n: usize,
    pub samples: usize,
    pub sigma: f64,
}

/// Scores of every block, in block order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockScoreReport {
    pub entries: Vec<BlockScore>,
}

impl BlockScoreReport {
    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::schema("/", e.to_string()))?;
        for (i, e) in r.entries.iter().enumerate() {
            if e.block != i + 1 {
                return Err(Error::schema(format!("/{i}/block"), format!("expected block {}", i + 1)));
            }
            if !e.score.is_finite() {
                return Err(Error::schema(format!("/{i}/score"), "score must be finite"));
            }
        }
        Ok(r)
    }
}

fn stream_rng(seed: u64, block: usize, item: usize, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((block as u64) << 44) | ((item as u64) << 24) | chunk as u64);
    rng
}

/// Monte-Carlo estimate of `tr(H)/n` on `target` with perturbation scale
/// `sigma` and `draws` perturbations per item. `stream` separates the random
/// streams of different targets sharing a seed.
pub fn estimate_score<T: Scalar>(
    target: &dyn PerturbationTarget<T>,
    sigma: T,
    draws: usize,
    chunk: usize,
    seed: u64,
    stream: usize,
) -> Result<(f64, f64, f64, f64, f64, usize)> {
    let dim = target.dim();
    let chunks_per_item = draws.div_ceil(chunk);
    let tasks: Vec<(usize, usize)> = (0..target.items())
        .flat_map(|i| (0..chunks_per_item).map(move |c| (i, c)))
        .collect();
    let parts = tasks
        .par_iter()
        .map(|&(item, c)| -> Result<Vec<(f64, f64)>> {
            let count = chunk.min(draws - c * chunk);
            let mut rng = stream_rng(seed, stream, item, c);
            let deltas: Vec<T> = (0..count * dim)
                .map(|_| {
                    let u: f64 = StandardNormal.sample(&mut rng);
                    sigma * T::lit(u)
                })
                .collect();
            let losses = target.losses(item, &deltas)?;
            let l0 = target.base_loss(item);
            let g = target.gradient(item);
            deltas
                .chunks(dim)
                .zip(losses)
                .map(|(d, l)| {
                    if !l.is_finite() {
                        return Err(Error::Numerical(format!(
                            "non-finite loss under perturbation with sigma {sigma}; sigma is likely too large"
                        )));
                    }
                    let lin: T = d.iter().zip(g).map(|(&d, &g)| d * g).sum();
                    let sq: T = d.iter().map(|&d| d * d).sum();
                    let num = T::lit(2.0) * (l - l0 - lin);
                    Ok((num.to_f64_exact(), sq.to_f64_exact()))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(f64, f64)> = parts.into_iter().flatten().collect();
    let m = pairs.len() as f64;
    let num = pairs.iter().map(|p| p.0).sum::<f64>() / m;
    let den = pairs.iter().map(|p| p.1).sum::<f64>() / m;
    if !(num.is_finite() && den.is_finite()) {
        return Err(Error::Numerical(format!(
            "perturbation statistics overflowed with sigma {sigma}; sigma is likely too large"
        )));
    }
    if den.abs() < MIN_DENOMINATOR {
        return Err(Error::Numerical(format!("perturbation energy {den} too small")));
    }
    let score = num / den;
    let (mut var_num, mut var_ratio) = (0.0, 0.0);
    for &(a, b) in &pairs {
        var_num += (a - num) * (a - num);
        let r = a - score * b;
        var_ratio += r * r;
    }
    let dof = (m - 1.0).max(1.0);
    let stderr = (var_num / dof / m).sqrt();
    let score_stderr = (var_ratio / dof / m).sqrt() / den;
    Ok((score, num, den, stderr, score_stderr, pairs.len()))
}

/// Score of 0-based block `t` on the first `config.items` calibration
/// samples of the full-precision network.
pub fn estimate_block_score<T: Scalar>(
    network: &Network<T>,
    calibration: &CalibrationSet<T>,
    t: usize,
    config: &PerturbationConfig,
) -> Result<BlockScore> {
    config.validate()?;
    let items = config.items.min(calibration.len());
    let subset = calibration.head(items)?;
    let target = BlockTarget::new(network, &subset.inputs, &subset.labels, t)?;
    score_target(&target, t, config)
}

fn score_target<T: Scalar>(target: &BlockTarget<'_, T>, t: usize, config: &PerturbationConfig) -> Result<BlockScore> {
    let sigma = match config.sigma {
        SigmaPolicy::Absolute(s) => T::lit(s),
        SigmaPolicy::RelativeRms(f) => T::lit(f) * target.output_rms(),
    };
    if !(sigma > T::zero()) {
        return Err(Error::Numerical(format!(
            "block {} has zero output energy; relative sigma is zero",
            t + 1
        )));
    }
    let draws = (config.num_samples / target.items()).max(1);
    let (score, numerator, denominator, stderr, score_stderr, samples) =
        estimate_score(target, sigma, draws, config.chunk, config.seed, t)?;
    Ok(BlockScore {
        block: t + 1,
        score,
        numerator,
        denominator,
        stderr,
        score_stderr,
        n: target.dim(),
        samples,
        sigma: sigma.to_f64_exact(),
    })
}

/// Scores every block with a shared seed; block `t` uses random stream `t`.
pub fn score_all_blocks<T: Scalar>(
    network: &Network<T>,
    calibration: &CalibrationSet<T>,
    config: &PerturbationConfig,
) -> Result<BlockScoreReport> {
    config.validate()?;
    let items = config.items.min(calibration.len());
    let subset = calibration.head(items)?;
    let mut g = Graph::new();
    let xv = g.constant(subset.inputs.clone());
    let out = network.forward_graph(&mut g, xv, &mut ForwardCtx::frozen(), None)?;
    let entries = out
        .block_outputs
        .iter()
        .enumerate()
        .map(|(t, &z)| {
            let target = BlockTarget::from_output(network, g.value(z).clone(), &subset.labels, t)?;
            score_target(&target, t, config)
        })
        .collect::<Result<_>>()?;
    Ok(BlockScoreReport { entries })
}

/// Mean Hessian diagonal `tr(H)/n` by second-order central differences,
/// averaged over the target's items.
pub fn hessian_mean_oracle<T: Scalar>(target: &dyn PerturbationTarget<T>, h: T) -> Result<T> {
    let dim = target.dim();
    if dim > ORACLE_MAX_DIM {
        return Err(Error::InvalidArgument(format!(
            "oracle limited to dimension {ORACLE_MAX_DIM}, got {dim}"
        )));
    }
    if !(h > T::zero()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let mut total = T::zero();
    for item in 0..target.items() {
        let mut deltas = vec![T::zero(); 2 * dim * dim];
        for i in 0..dim {
            deltas[(2 * i) * dim + i] = h;
            deltas[(2 * i + 1) * dim + i] = -h;
        }
        let l = target.losses(item, &deltas)?;
        let l0 = target.base_loss(item);
        for i in 0..dim {
            let d2 = (l[2 * i] - T::lit(2.0) * l0 + l[2 * i + 1]) / (h * h);
            if !d2.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite second difference at coordinate {i} of item {item}"
                )));
            }
            total += d2;
        }
    }
    Ok(total / T::lit((dim * target.items()) as f64))
}

/// Oracle for 0-based block `t` on the first `items` calibration samples.
pub fn block_hessian_mean_oracle<T: Scalar>(
    network: &Network<T>,
    calibration: &CalibrationSet<T>,
    t: usize,
    items: usize,
    h: T,
) -> Result<T> {
    let subset = calibration.head(items.min(calibration.len()))?;
    let target = BlockTarget::new(network, &subset.inputs, &subset.labels, t)?;
    hessian_mean_oracle(&target, h)
}

/// `L(z_t + dz) - L(z_t)` for the batch-mean task loss, re-running blocks
/// after `t` (0-based) and the head on the perturbed output.
pub fn block_quant_loss<T: Scalar>(
    network: &Network<T>,
    capture: &CaptureRecord<T>,
    labels: &[usize],
    t: usize,
    dz: &Tensor<T>,
) -> Result<T> {
    check_block(network, t)?;
    let z = &capture.block_outputs[t];
    if dz.shape() != z.shape() {
        return Err(Error::shape(
            "block_quant_loss",
            format!("perturbation {:?} vs block output {:?}", dz.shape(), z.shape()),
        ));
    }
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let dv = g.constant(dz.clone());
    let zp = g.add(zv, dv)?;
    let logits = network.forward_from_block(&mut g, t, zp, &mut ForwardCtx::frozen())?;
    let loss = network.task_loss(&mut g, logits, labels)?;
    Ok(g.value(loss).item()? - capture.loss)
}

/// Gradient of the batch-mean task loss with respect to the output of block
/// `t` (0-based).
pub fn block_output_gradient<T: Scalar>(
    network: &Network<T>,
    capture: &CaptureRecord<T>,
    labels: &[usize],
    t: usize,
) -> Result<Tensor<T>> {
    check_block(network, t)?;
    let mut g = Graph::new();
    let zv = g.leaf(capture.block_outputs[t].clone().with_grad(true));
    let logits = network.forward_from_block(&mut g, t, zv, &mut ForwardCtx::frozen())?;
    let loss = network.task_loss(&mut g, logits, labels)?;
    Ok(g.backward(loss)?.wrt(zv)?.clone())
}
