//! Pack-wise reconstruction: for each pack in order, Adam adjusts the weight
//! rounding offsets and input-activation scales of its blocks so the
//! quantized pack reproduces the full-precision pack on the same inputs.

use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{CalibrationSet, ForwardCtx, Network};
use crate::optim::{Adam, AdamConfig};
use crate::packing::PackPlan;
use crate::quant::{quantize_network, ActivationRanges, BitPlan, ParamKind, QuantizedModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where a pack's input comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputSource {
    FullPrecision,
    /// Output of the already reconstructed quantized packs before it.
    #[default]
    QuantizedUpstream,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructionConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub input_source: InputSource,
    pub seed: u64,
    /// Iterations averaged into one curve point.
    pub log_interval: usize,
    /// Samples of the fixed batch on which initial and final losses are
    /// measured.
    pub eval_samples: usize,
    /// Abort when the logged loss exceeds this multiple of the initial loss
    /// for `divergence_patience` consecutive logs.
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            iterations: 500,
            batch_size: 32,
            base_lr: 4e-5,
            input_source: InputSource::QuantizedUpstream,
            seed: 0,
            log_interval: 10,
            eval_samples: 256,
            divergence_factor: 1e3,
            divergence_patience: 50,
        }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self, calibration_size: usize) -> Result<()> {
        if self.iterations == 0 || self.log_interval == 0 || self.eval_samples == 0 {
            return Err(Error::InvalidArgument(
                "iterations, log_interval and eval_samples must be at least 1".into(),
            ));
        }
        if self.batch_size == 0 || self.batch_size > calibration_size {
            return Err(Error::InvalidArgument(format!(
                "batch size {} must be in 1..={calibration_size}",
                self.batch_size
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.base_lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionTrace {
    /// 1-based inclusive block range.
    pub pack: (usize, usize),
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean training loss of every `log_interval` iterations.
    pub curve: Vec<f64>,
    pub seed: u64,
    pub wall_time_ms: u64,
}

/// Random stream of the pack `lo..=hi` under run seed `seed`; identical for
/// any code path that reconstructs the same pack.
fn pack_rng(seed: u64, lo: usize, hi: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((lo as u64) << 32) | hi as u64);
    rng
}

/// Batch-mean of per-sample Frobenius distances between the quantized pack
/// applied to `x` and `target`.
fn pack_loss<T: Scalar>(
    q: &QuantizedModel<T>,
    g: &mut Graph<T>,
    range: std::ops::Range<usize>,
    x: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<(crate::autodiff::Var, Vec<crate::quant::BoundParam>)> {
    let (sites, bound) = q.bind(g, range.clone());
    let xv = g.constant(x.clone());
    let out = q
        .network
        .forward_blocks(g, xv, range, &mut ForwardCtx::frozen(), Some(&sites))?;
    let tv = g.constant(target.clone());
    let diff = g.sub(out, tv)?;
    let norms = g.row_norms(diff)?;
    Ok((g.mean(norms)?, bound))
}

fn eval_pack_loss<T: Scalar>(
    q: &QuantizedModel<T>,
    range: std::ops::Range<usize>,
    x: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<f64> {
    let mut g = Graph::new();
    let (loss, _) = pack_loss(q, &mut g, range, x, target)?;
    Ok(g.value(loss).item()?.to_f64_exact())
}

/// Inputs and full-precision targets of the 0-based block range for every
/// calibration sample.
fn pack_io<T: Scalar>(
    fp: &Network<T>,
    q: &QuantizedModel<T>,
    range: std::ops::Range<usize>,
    calibration: &CalibrationSet<T>,
    source: InputSource,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let x = match source {
        InputSource::QuantizedUpstream => q.block_input(&calibration.inputs, range.start)?,
        InputSource::FullPrecision => QuantizedModel::full_precision(fp).block_input(&calibration.inputs, range.start)?,
    };
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = fp.forward_blocks(&mut g, xv, range, &mut ForwardCtx::frozen(), None)?;
    Ok((x, g.value(y).clone()))
}

/// Reconstructs the 1-based pack `lo..=hi` of `q` in place.
pub fn reconstruct_pack<T: Scalar>(
    fp: &Network<T>,
    q: &mut QuantizedModel<T>,
    pack: (usize, usize),
    calibration: &CalibrationSet<T>,
    config: &ReconstructionConfig,
) -> Result<ReconstructionTrace> {
    let start = Instant::now();
    config.validate(calibration.len())?;
    let (lo, hi) = pack;
    if lo == 0 || hi < lo || hi > fp.block_count() {
        return Err(Error::InvalidArgument(format!(
            "pack [{lo}, {hi}] outside blocks 1..={}",
            fp.block_count()
        )));
    }
    let range = lo - 1..hi;
    let (inputs, targets) = pack_io(fp, q, range.clone(), calibration, config.input_source)?;
    let eval_n = config.eval_samples.min(calibration.len());
    let eval_x = inputs.slice_rows(0, eval_n)?;
    let eval_y = targets.slice_rows(0, eval_n)?;

    q.enable_learning(range.clone());
    let initial_loss = eval_pack_loss(q, range.clone(), &eval_x, &eval_y)?;

    // Current values of the learnable parameters, in binding order.
    let mut probe = Graph::new();
    let (_, layout) = q.bind(&mut probe, range.clone());
    drop(probe);
    let mut params: Vec<Tensor<T>> = layout
        .iter()
        .map(|b| {
            let p = q.site_mut(b.site).expect("bound site exists");
            match b.kind {
                ParamKind::Scale => Tensor::vector(p.scales.clone()),
                ParamKind::Offsets => p.offsets.clone().expect("learnable offsets exist"),
            }
        })
        .collect();
    let scale_floor: Vec<Option<Vec<T>>> = layout
        .iter()
        .zip(&params)
        .map(|(b, t)| (b.kind == ParamKind::Scale).then(|| t.data().iter().map(|&s| s * T::lit(1e-3)).collect()))
        .collect();

    let mut adam = Adam::new(AdamConfig::new(config.base_lr, config.iterations));
    let mut rng = pack_rng(config.seed, lo, hi);
    let mut curve = Vec::with_capacity(config.iterations / config.log_interval);
    let mut window = 0.0;
    let mut over = 0;
    for it in 0..config.iterations {
        let rows = index::sample(&mut rng, calibration.len(), config.batch_size).into_vec();
        let xb = inputs.select_rows(&rows)?;
        let yb = targets.select_rows(&rows)?;
        let mut g = Graph::new();
        let (loss, bound) = pack_loss(q, &mut g, range.clone(), &xb, &yb)?;
        let value = g.value(loss).item()?.to_f64_exact();
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "reconstruction loss of pack [{lo}, {hi}] became non-finite at iteration {it}"
            )));
        }
        let grads = g.backward(loss)?;
        let grad_tensors = bound
            .iter()
            .map(|b| grads.wrt(b.var).cloned())
            .collect::<Result<Vec<_>>>()?;
        {
            let mut refs: Vec<&mut Tensor<T>> = params.iter_mut().collect();
            let grefs: Vec<&Tensor<T>> = grad_tensors.iter().collect();
            adam.step(&mut refs, &grefs)?;
        }
        for ((b, t), floor) in layout.iter().zip(&mut params).zip(&scale_floor) {
            let p = q.site_mut(b.site).expect("bound site exists");
            match b.kind {
                ParamKind::Scale => {
                    let floor = floor.as_ref().expect("scale floor recorded");
                    for (s, &f) in t.data_mut().iter_mut().zip(floor) {
                        *s = s.max(f);
                    }
                    p.scales = t.data().to_vec();
                }
                ParamKind::Offsets => {
                    let half = T::lit(0.5);
                    for o in t.data_mut() {
                        *o = o.max(-half).min(half);
                    }
                    p.offsets = Some(t.clone());
                }
            }
        }
        window += value;
        if (it + 1) % config.log_interval == 0 {
            let mean = window / config.log_interval as f64;
            window = 0.0;
            curve.push(mean);
            if mean > config.divergence_factor * initial_loss && initial_loss > 0.0 {
                over += 1;
                if over >= config.divergence_patience {
                    return Err(Error::Numerical(format!(
                        "reconstruction of pack [{lo}, {hi}] diverged: loss {mean:.3e} vs initial {initial_loss:.3e} \
                         for {over} consecutive logs (try a smaller base_lr)"
                    )));
                }
            } else {
                over = 0;
            }
        }
    }
    q.freeze();
    let final_loss = eval_pack_loss(q, range, &eval_x, &eval_y)?;
    Ok(ReconstructionTrace {
        pack,
        initial_loss,
        final_loss,
        curve,
        seed: config.seed,
        wall_time_ms: start.elapsed().as_millis() as u64,
    })
}

/// MinMax quantization under `bits` followed by reconstruction of every pack
/// of `plan` in ascending order.
pub fn reconstruct_network<T: Scalar>(
    fp: &Network<T>,
    plan: &PackPlan,
    bits: &BitPlan,
    calibration: &CalibrationSet<T>,
    config: &ReconstructionConfig,
) -> Result<(QuantizedModel<T>, Vec<ReconstructionTrace>)> {
    plan.validate(fp.block_count())?;
    let ranges = ActivationRanges::calibrate(fp, &calibration.inputs)?;
    let mut q = quantize_network(fp, bits, &ranges)?;
    let mut traces = Vec::with_capacity(plan.packs.len());
    for &pack in &plan.packs {
        traces.push(reconstruct_pack(fp, &mut q, pack, calibration, config)?);
    }
    Ok((q, traces))
}

/// Block-by-block reconstruction of an already quantized model.
pub fn reconstruct_blockwise<T: Scalar>(
    fp: &Network<T>,
    q: &mut QuantizedModel<T>,
    calibration: &CalibrationSet<T>,
    config: &ReconstructionConfig,
) -> Result<Vec<ReconstructionTrace>> {
    (1..=fp.block_count())
        .map(|b| reconstruct_pack(fp, q, (b, b), calibration, config))
        .collect()
}
