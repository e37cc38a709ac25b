//! Fake-quantized view of a [`Network`]: per-channel weight quantizers for
//! every block, stem and head layer, and a per-tensor quantizer on every
//! block input.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::params::{is_bypass, minmax_to_affine, Learnable, QuantParams};
use super::{calibrate_minmax, check_bits};
use crate::autodiff::{FakeQuantSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{
    BlockSiteVars, CaptureRecord, ForwardCtx, ModelDocument, Network, NetworkSiteVars, SiteVars,
};
use crate::model::io::{decode, encode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Samples used to calibrate activation ranges.
pub const ACTIVATION_CALIBRATION_SAMPLES: usize = 256;
/// Sub-batches whose extrema are averaged.
pub const ACTIVATION_SUB_BATCHES: usize = 8;

/// Location of a quantizer in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SiteId {
    StemWeight { layer: usize },
    /// 1-based block index.
    BlockInput { block: usize },
    BlockWeight { block: usize, layer: usize },
    HeadWeight { layer: usize },
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SiteId::StemWeight { layer } => write!(f, "stem.{layer}.weight"),
            SiteId::BlockInput { block } => write!(f, "block.{block}.input"),
            SiteId::BlockWeight { block, layer } => write!(f, "block.{block}.{layer}.weight"),
            SiteId::HeadWeight { layer } => write!(f, "head.{layer}.weight"),
        }
    }
}

impl std::str::FromStr for SiteId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('.').collect();
        let num = |p: &str| {
            p.parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad site id {s:?}")))
        };
        match parts.as_slice() {
            ["stem", l, "weight"] => Ok(SiteId::StemWeight { layer: num(l)? }),
            ["head", l, "weight"] => Ok(SiteId::HeadWeight { layer: num(l)? }),
            ["block", b, "input"] => Ok(SiteId::BlockInput { block: num(b)? }),
            ["block", b, l, "weight"] => Ok(SiteId::BlockWeight {
                block: num(b)?,
                layer: num(l)?,
            }),
            _ => Err(Error::InvalidArgument(format!("bad site id {s:?}"))),
        }
    }
}

/// Bit-widths for every quantizer group. 32 disables a group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitPlan {
    /// Weight bits per block.
    pub weight_bits: Vec<u32>,
    /// Input-activation bits per block.
    pub act_bits: Vec<u32>,
    /// Weight bits for stem and head layers.
    pub edge_bits: u32,
}

impl BitPlan {
    pub fn uniform(blocks: usize, weight_bits: u32, act_bits: u32, edge_bits: u32) -> Self {
        BitPlan {
            weight_bits: vec![weight_bits; blocks],
            act_bits: vec![act_bits; blocks],
            edge_bits,
        }
    }

    /// No quantization anywhere.
    pub fn bypass(blocks: usize) -> Self {
        Self::uniform(blocks, 32, 32, 32)
    }

    fn validate(&self, blocks: usize) -> Result<()> {
        if self.weight_bits.len() != blocks || self.act_bits.len() != blocks {
            return Err(Error::InvalidArgument(format!(
                "bit plan covers {} weight / {} activation entries for {blocks} blocks",
                self.weight_bits.len(),
                self.act_bits.len()
            )));
        }
        for &b in self.weight_bits.iter().chain(&self.act_bits).chain([&self.edge_bits]) {
            check_bits(b)?;
        }
        Ok(())
    }
}

/// Observed range of every block input, averaged over sub-batches.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRanges<T> {
    pub lo: Vec<T>,
    pub hi: Vec<T>,
}

impl<T: Scalar> ActivationRanges<T> {
    /// Runs the full-precision network on the first
    /// [`ACTIVATION_CALIBRATION_SAMPLES`] rows of `inputs` and averages each
    /// block input's min and max over [`ACTIVATION_SUB_BATCHES`] equal
    /// sub-batches.
    pub fn calibrate(network: &Network<T>, inputs: &Tensor<T>) -> Result<Self> {
        let rows = inputs.shape()[0].min(ACTIVATION_CALIBRATION_SAMPLES);
        let subs = ACTIVATION_SUB_BATCHES.min(rows);
        let per = rows / subs;
        let n = network.block_count();
        let mut lo = vec![T::zero(); n];
        let mut hi = vec![T::zero(); n];
        for s in 0..subs {
            let x = inputs.slice_rows(s * per, (s + 1) * per)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let mut ctx = ForwardCtx::frozen();
            let mut h = network.stem_forward(&mut g, xv, &mut ctx, None)?;
            for t in 0..n {
                let v = g.value(h).data();
                let (mn, mx) = v
                    .iter()
                    .fold((T::infinity(), T::neg_infinity()), |(a, b), &x| (a.min(x), b.max(x)));
                lo[t] += mn;
                hi[t] += mx;
                h = network.forward_blocks(&mut g, h, t..t + 1, &mut ctx, None)?;
            }
        }
        let k = T::lit(subs as f64);
        lo.iter_mut().for_each(|v| *v /= k);
        hi.iter_mut().for_each(|v| *v /= k);
        Ok(ActivationRanges { lo, hi })
    }

    pub fn params(&self, block: usize, bits: u32) -> Result<QuantParams<T>> {
        let (s, z) = minmax_to_affine(&self.lo[block..=block], &self.hi[block..=block], bits);
        QuantParams::per_tensor(s[0], z[0], bits)
    }
}

/// Quantizers of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockQuant<T> {
    pub input: Option<QuantParams<T>>,
    /// Indexed like the block's layers.
    pub weights: Vec<Option<QuantParams<T>>>,
}

/// A network together with the quantizers applied during its forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel<T> {
    pub network: Network<T>,
    pub stem: Vec<Option<QuantParams<T>>>,
    pub blocks: Vec<BlockQuant<T>>,
    pub head: Vec<Option<QuantParams<T>>>,
}

fn weight_sites<T: Scalar>(
    layers: &[crate::model::Layer<T>],
    bits: u32,
) -> Result<Vec<Option<QuantParams<T>>>> {
    layers
        .iter()
        .map(|l| match (l.weight(), is_bypass(bits)) {
            (Some(w), false) => calibrate_minmax(w, bits, l.output_channel_axis()).map(Some),
            _ => Ok(None),
        })
        .collect()
}

/// MinMax-calibrated quantized view of `network` under `plan`.
pub fn quantize_network<T: Scalar>(
    network: &Network<T>,
    plan: &BitPlan,
    ranges: &ActivationRanges<T>,
) -> Result<QuantizedModel<T>> {
    let n = network.block_count();
    plan.validate(n)?;
    if ranges.lo.len() != n {
        return Err(Error::InvalidArgument(format!(
            "activation ranges for {} blocks, network has {n}",
            ranges.lo.len()
        )));
    }
    let blocks = network
        .blocks
        .iter()
        .enumerate()
        .map(|(t, b)| {
            let input = if is_bypass(plan.act_bits[t]) {
                None
            } else {
                Some(ranges.params(t, plan.act_bits[t])?)
            };
            Ok(BlockQuant {
                input,
                weights: weight_sites(&b.layers, plan.weight_bits[t])?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(QuantizedModel {
        network: network.clone(),
        stem: weight_sites(&network.stem, plan.edge_bits)?,
        blocks,
        head: weight_sites(&network.head, plan.edge_bits)?,
    })
}

/// Graph leaves bound for trainable quantizer parameters.
#[derive(Clone, Debug)]
pub struct BoundParam {
    pub site: SiteId,
    pub var: Var,
    pub kind: ParamKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Scale,
    Offsets,
}

fn bind_site<T: Scalar>(
    g: &mut Graph<T>,
    site: SiteId,
    p: &QuantParams<T>,
    trainable: bool,
    bound: &mut Vec<BoundParam>,
) -> SiteVars<T> {
    let scale_t = Tensor::vector(p.scales.clone());
    let scale = if trainable && p.learnable.scale {
        let v = g.param(scale_t);
        bound.push(BoundParam {
            site,
            var: v,
            kind: ParamKind::Scale,
        });
        v
    } else {
        g.constant(scale_t)
    };
    let offsets = p.offsets.as_ref().map(|o| {
        if trainable && p.learnable.offsets {
            let v = g.param(o.clone());
            bound.push(BoundParam {
                site,
                var: v,
                kind: ParamKind::Offsets,
            });
            v
        } else {
            g.constant(o.clone())
        }
    });
    SiteVars {
        scale,
        offsets,
        spec: FakeQuantSpec {
            zero_points: p.zero_points.clone(),
            bits: p.bits,
            axis: p.channel_axis.unwrap_or(0),
        },
    }
}

impl<T: Scalar> QuantizedModel<T> {
    /// The unquantized view of `network`.
    pub fn full_precision(network: &Network<T>) -> Self {
        let none = |n: usize| vec![None; n];
        QuantizedModel {
            network: network.clone(),
            stem: none(network.stem.len()),
            blocks: network
                .blocks
                .iter()
                .map(|b| BlockQuant {
                    input: None,
                    weights: none(b.layers.len()),
                })
                .collect(),
            head: none(network.head.len()),
        }
    }

    /// Every quantizer with its location, in forward order.
    pub fn sites(&self) -> Vec<(SiteId, &QuantParams<T>)> {
        let mut out = Vec::new();
        for (layer, p) in self.stem.iter().enumerate() {
            if let Some(p) = p {
                out.push((SiteId::StemWeight { layer }, p));
            }
        }
        for (t, b) in self.blocks.iter().enumerate() {
            if let Some(p) = &b.input {
                out.push((SiteId::BlockInput { block: t + 1 }, p));
            }
            for (layer, p) in b.weights.iter().enumerate() {
                if let Some(p) = p {
                    out.push((SiteId::BlockWeight { block: t + 1, layer }, p));
                }
            }
        }
        for (layer, p) in self.head.iter().enumerate() {
            if let Some(p) = p {
                out.push((SiteId::HeadWeight { layer }, p));
            }
        }
        out
    }

    pub fn site_mut(&mut self, site: SiteId) -> Option<&mut QuantParams<T>> {
        match site {
            SiteId::StemWeight { layer } => self.stem.get_mut(layer)?.as_mut(),
            SiteId::HeadWeight { layer } => self.head.get_mut(layer)?.as_mut(),
            SiteId::BlockInput { block } => self.blocks.get_mut(block.checked_sub(1)?)?.input.as_mut(),
            SiteId::BlockWeight { block, layer } => self
                .blocks
                .get_mut(block.checked_sub(1)?)?
                .weights
                .get_mut(layer)?
                .as_mut(),
        }
    }

    /// Gives every weight quantizer of the 0-based blocks in `range` zero
    /// rounding offsets and marks offsets (weights) and scales (block
    /// inputs) learnable.
    pub fn enable_learning(&mut self, range: Range<usize>) {
        for t in range {
            let b = &mut self.blocks[t];
            if let Some(p) = &mut b.input {
                p.learnable = Learnable {
                    scale: true,
                    offsets: false,
                };
            }
            for (li, p) in b.weights.iter_mut().enumerate() {
                if let Some(p) = p {
                    p.learnable = Learnable {
                        scale: false,
                        offsets: true,
                    };
                    if p.offsets.is_none() {
                        let w = self.network.blocks[t].layers[li]
                            .weight()
                            .expect("weight site on a weighted layer");
                        p.offsets = Some(Tensor::zeros(w.shape()));
                    }
                }
            }
        }
    }

    /// Clears learnable flags everywhere.
    pub fn freeze(&mut self) {
        for b in &mut self.blocks {
            for p in b.input.iter_mut().chain(b.weights.iter_mut().flatten()) {
                p.learnable = Learnable::default();
            }
        }
    }

    /// Binds all quantizers onto `g`. Learnable parameters of the 0-based
    /// blocks in `trainable` become gradient leaves and are listed in the
    /// returned vector.
    pub fn bind(&self, g: &mut Graph<T>, trainable: Range<usize>) -> (NetworkSiteVars<T>, Vec<BoundParam>) {
        let mut bound = Vec::new();
        let stem = self
            .stem
            .iter()
            .enumerate()
            .map(|(layer, p)| p.as_ref().map(|p| bind_site(g, SiteId::StemWeight { layer }, p, false, &mut bound)))
            .collect();
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(t, b)| {
                let train = trainable.contains(&t);
                let input = b
                    .input
                    .as_ref()
                    .map(|p| bind_site(g, SiteId::BlockInput { block: t + 1 }, p, train, &mut bound));
                let weights = b
                    .weights
                    .iter()
                    .enumerate()
                    .map(|(layer, p)| {
                        p.as_ref()
                            .map(|p| bind_site(g, SiteId::BlockWeight { block: t + 1, layer }, p, train, &mut bound))
                    })
                    .collect();
                Some(BlockSiteVars { input, weights })
            })
            .collect();
        let head = self
            .head
            .iter()
            .enumerate()
            .map(|(layer, p)| p.as_ref().map(|p| bind_site(g, SiteId::HeadWeight { layer }, p, false, &mut bound)))
            .collect();
        (NetworkSiteVars { stem, blocks, head }, bound)
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (sites, _) = self.bind(&mut g, 0..0);
        let xv = g.constant(x.clone());
        let out = self
            .network
            .forward_graph(&mut g, xv, &mut ForwardCtx::frozen(), Some(&sites))?;
        Ok(g.value(out.logits).clone())
    }

    pub fn forward_capture(&self, x: &Tensor<T>, labels: &[usize]) -> Result<CaptureRecord<T>> {
        let mut g = Graph::new();
        let (sites, _) = self.bind(&mut g, 0..0);
        let xv = g.constant(x.clone());
        let out = self
            .network
            .forward_graph(&mut g, xv, &mut ForwardCtx::frozen(), Some(&sites))?;
        let loss = self.network.task_loss(&mut g, out.logits, labels)?;
        Ok(CaptureRecord {
            block_outputs: out.block_outputs.iter().map(|&v| g.value(v).clone()).collect(),
            logits: g.value(out.logits).clone(),
            loss: g.value(loss).item()?,
        })
    }

    /// Input of 0-based block `t` under quantized execution of everything
    /// before it.
    pub fn block_input(&self, x: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (sites, _) = self.bind(&mut g, 0..0);
        let xv = g.constant(x.clone());
        let mut ctx = ForwardCtx::frozen();
        let h = self.network.stem_forward(&mut g, xv, &mut ctx, Some(&sites))?;
        let h = self.network.forward_blocks(&mut g, h, 0..t, &mut ctx, Some(&sites))?;
        Ok(g.value(h).clone())
    }

    /// Weight bits of each block (32 when unquantized).
    pub fn weight_bits(&self) -> Vec<u32> {
        self.blocks
            .iter()
            .map(|b| b.weights.iter().flatten().map(|p| p.bits).next().unwrap_or(32))
            .collect()
    }

    pub fn to_document(&self) -> QuantizedModelDocument {
        QuantizedModelDocument {
            model: self.network.to_document(),
            sites: self
                .sites()
                .into_iter()
                .map(|(id, p)| SiteDoc {
                    site_id: id.to_string(),
                    s: encode(&p.scales),
                    z0: encode(&p.zero_points),
                    k: p.bits,
                    per_channel: p.per_channel(),
                    axis: p.channel_axis,
                    offsets: p.offsets.as_ref().map(|o| encode(o.data())),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: &QuantizedModelDocument) -> Result<Self> {
        let network = Network::from_document(&doc.model)?;
        let mut q = QuantizedModel::full_precision(&network);
        for (i, site) in doc.sites.iter().enumerate() {
            let path = format!("/sites/{i}");
            let id: SiteId = site
                .site_id
                .parse()
                .map_err(|e: Error| Error::schema(format!("{path}/site_id"), e.to_string()))?;
            let weight_shape = match id {
                SiteId::StemWeight { layer } => network.stem.get(layer).and_then(|l| l.weight()),
                SiteId::HeadWeight { layer } => network.head.get(layer).and_then(|l| l.weight()),
                SiteId::BlockWeight { block, layer } => network
                    .blocks
                    .get(block.wrapping_sub(1))
                    .and_then(|b| b.layers.get(layer))
                    .and_then(|l| l.weight()),
                SiteId::BlockInput { .. } => None,
            }
            .map(|w| w.shape().to_vec());
            let offsets = match (&site.offsets, &weight_shape) {
                (None, _) => None,
                (Some(o), Some(shape)) => Some(
                    Tensor::new(shape.clone(), decode(o, &format!("{path}/offsets"))?)
                        .map_err(|e| Error::schema(format!("{path}/offsets"), e.to_string()))?,
                ),
                (Some(_), None) => {
                    return Err(Error::schema(format!("{path}/offsets"), "offsets only apply to weight sites"))
                }
            };
            let params = QuantParams {
                scales: decode(&site.s, &format!("{path}/s"))?,
                zero_points: decode(&site.z0, &format!("{path}/z0"))?,
                bits: site.k,
                channel_axis: if site.per_channel { site.axis.or(Some(0)) } else { None },
                offsets,
                learnable: Learnable::default(),
            };
            params
                .validate()
                .map_err(|e| Error::schema(path.clone(), e.to_string()))?;
            let slot = match id {
                SiteId::StemWeight { layer } => q.stem.get_mut(layer),
                SiteId::HeadWeight { layer } => q.head.get_mut(layer),
                SiteId::BlockInput { block } => q.blocks.get_mut(block.wrapping_sub(1)).map(|b| &mut b.input),
                SiteId::BlockWeight { block, layer } => q
                    .blocks
                    .get_mut(block.wrapping_sub(1))
                    .and_then(|b| b.weights.get_mut(layer)),
            };
            let slot = slot.ok_or_else(|| {
                Error::schema(format!("{path}/site_id"), format!("site {id} does not exist in the model"))
            })?;
            *slot = Some(params);
        }
        // Channel counts must match the tensors they quantize.
        q.logits(&Tensor::zeros(&[&[1], &network.input_shape[..]].concat()))
            .map_err(|e| Error::schema("/sites", e.to_string()))?;
        Ok(q)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: QuantizedModelDocument =
            serde_json::from_str(text).map_err(|e| Error::schema("/", e.to_string()))?;
        Self::from_document(&doc)
    }
}

/// One quantizer in a quantized-model document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SiteDoc {
    pub site_id: String,
    pub s: Vec<String>,
    pub z0: Vec<String>,
    pub k: u32,
    pub per_channel: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offsets: Option<Vec<String>>,
}

/// Model document plus its quantizers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuantizedModelDocument {
    pub model: ModelDocument,
    pub sites: Vec<SiteDoc>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, generate_dataset, ArchSpec, DatasetKind};

    fn setup() -> (Network<f64>, Tensor<f64>) {
        let net = build_model(&ArchSpec::new("resmlp-4x16", 2, 3), 5).unwrap();
        let data = generate_dataset::<f64>(DatasetKind::ConcentricRings, None, 300, 1).unwrap();
        (net, data.calibration.inputs)
    }

    #[test]
    fn bypass_matches_full_precision_exactly() {
        let (net, x) = setup();
        let ranges = ActivationRanges::calibrate(&net, &x).unwrap();
        let q = quantize_network(&net, &BitPlan::bypass(4), &ranges).unwrap();
        assert!(q.sites().is_empty());
        assert_eq!(q.logits(&x).unwrap(), net.logits(&x).unwrap());
    }

    #[test]
    fn site_ids_round_trip() {
        for id in [
            SiteId::StemWeight { layer: 0 },
            SiteId::BlockInput { block: 3 },
            SiteId::BlockWeight { block: 2, layer: 2 },
            SiteId::HeadWeight { layer: 1 },
        ] {
            assert_eq!(id.to_string().parse::<SiteId>().unwrap(), id);
        }
        assert!("block.x.input".parse::<SiteId>().is_err());
    }

    #[test]
    fn quantized_document_round_trip() {
        let (net, x) = setup();
        let ranges = ActivationRanges::calibrate(&net, &x).unwrap();
        let mut q = quantize_network(&net, &BitPlan::uniform(4, 3, 4, 8), &ranges).unwrap();
        q.enable_learning(1..2);
        if let Some(p) = q.site_mut(SiteId::BlockWeight { block: 2, layer: 0 }) {
            p.offsets.as_mut().unwrap().data_mut()[3] = 0.375;
        }
        q.freeze();
        let back = QuantizedModel::<f64>::from_json(&q.to_json().unwrap()).unwrap();
        assert_eq!(back.logits(&x).unwrap(), q.logits(&x).unwrap());
        assert_eq!(back.sites().len(), q.sites().len());
    }

    #[test]
    fn low_bits_perturb_outputs() {
        let (net, x) = setup();
        let ranges = ActivationRanges::calibrate(&net, &x).unwrap();
        let q = quantize_network(&net, &BitPlan::uniform(4, 2, 2, 2), &ranges).unwrap();
        assert_ne!(q.logits(&x).unwrap(), net.logits(&x).unwrap());
        assert_eq!(q.weight_bits(), vec![2; 4]);
    }

    #[test]
    fn plan_length_checked() {
        let (net, x) = setup();
        let ranges = ActivationRanges::calibrate(&net, &x).unwrap();
        assert!(quantize_network(&net, &BitPlan::uniform(3, 4, 4, 8), &ranges).is_err());
    }
}
