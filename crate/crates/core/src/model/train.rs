//! Full-precision training used to produce the committed fixtures.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CalibrationSet, ForwardCtx, Network};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub min_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stop once training accuracy reaches this (after `min_epochs`).
    pub target_accuracy: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 200,
            min_epochs: 40,
            batch_size: 64,
            lr: 3e-3,
            target_accuracy: 0.95,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub train_accuracy: f64,
    pub final_loss: f64,
}

fn accuracy<T: Scalar>(net: &Network<T>, data: &CalibrationSet<T>) -> Result<f64> {
    let pred = net.logits(&data.inputs)?.argmax_rows();
    let hits = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Fits `net` with Adam on cross-entropy. Fails if the target accuracy is
/// not reached within `max_epochs`.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    data: &CalibrationSet<T>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if cfg.batch_size == 0 || cfg.batch_size > data.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {} for {} samples",
            cfg.batch_size,
            data.len()
        )));
    }
    let batches = data.len() / cfg.batch_size;
    let mut adam = Adam::new(AdamConfig::new(cfg.lr, cfg.max_epochs * batches));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last_loss = f64::NAN;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for b in 0..batches {
            let rows = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let (x, labels) = data.select(rows)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let mut ctx = ForwardCtx::trainable();
            let out = net.forward_graph(&mut g, xv, &mut ctx, None)?;
            let loss = net.task_loss(&mut g, out.logits, &labels)?;
            let lv = g.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::Numerical(format!("training loss diverged at epoch {epoch}")));
            }
            epoch_loss += lv.to_f64_exact();
            let grads = g.backward(loss)?;
            let grad_tensors: Vec<Tensor<T>> = ctx
                .bound
                .iter()
                .map(|&v| grads.wrt(v).cloned())
                .collect::<Result<_>>()?;
            let grad_refs: Vec<&Tensor<T>> = grad_tensors.iter().collect();
            let mut params = net.parameters_mut();
            adam.step(&mut params, &grad_refs)?;
        }
        last_loss = epoch_loss / batches as f64;
        if epoch >= cfg.min_epochs {
            let acc = accuracy(net, data)?;
            if acc >= cfg.target_accuracy {
                return Ok(TrainReport {
                    epochs: epoch,
                    train_accuracy: acc,
                    final_loss: last_loss,
                });
            }
        }
    }
    let acc = accuracy(net, data)?;
    Err(Error::Numerical(format!(
        "training reached accuracy {acc:.4} (loss {last_loss:.4}) after {} epochs, below target {}",
        cfg.max_epochs, cfg.target_accuracy
    )))
}
