//! Per-pack weight bit-widths from a multiple-choice knapsack:
//! maximize `sum_j b_j * omega_j` subject to `sum_j b_j * p_j <= C`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CalibrationSet, Network};
use crate::packing::PackPlan;
use crate::quant::{check_bits, quantize_network, ActivationRanges, BitPlan};
use crate::scalar::Scalar;

/// Largest search space the exhaustive solver accepts.
pub const BRUTEFORCE_LIMIT: u64 = 1_000_000;

/// Increase of the calibration loss when only block `t` (0-based) has its
/// weights and input activation MinMax-quantized to `bits`.
pub fn pack_quant_loss<T: Scalar>(
    network: &Network<T>,
    calibration: &CalibrationSet<T>,
    ranges: &ActivationRanges<T>,
    t: usize,
    bits: u32,
) -> Result<T> {
    let n = network.block_count();
    if t >= n {
        return Err(Error::InvalidArgument(format!("block index {} out of range 1..={n}", t + 1)));
    }
    check_bits(bits)?;
    let mut plan = BitPlan::bypass(n);
    plan.weight_bits[t] = bits;
    plan.act_bits[t] = bits;
    let q = quantize_network(network, &plan, ranges)?;
    let base = network.forward_capture(&calibration.inputs, &calibration.labels)?.loss;
    let quant = q.forward_capture(&calibration.inputs, &calibration.labels)?.loss;
    Ok(quant - base)
}

/// [`pack_quant_loss`] for every block, evaluated in parallel.
pub fn block_quant_losses<T: Scalar>(
    network: &Network<T>,
    calibration: &CalibrationSet<T>,
    ranges: &ActivationRanges<T>,
    bits: u32,
) -> Result<Vec<T>> {
    (0..network.block_count())
        .into_par_iter()
        .map(|t| pack_quant_loss(network, calibration, ranges, t, bits))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackSensitivity {
    pub range: (usize, usize),
    pub omega: f64,
    pub scores: Vec<f64>,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub packs: Vec<PackSensitivity>,
}

impl SensitivityReport {
    pub fn omegas(&self) -> Vec<f64> {
        self.packs.iter().map(|p| p.omega).collect()
    }
}

/// `omega_j = (1/n_j) * sum_i S_j[i] * Lq_j[i]` over the blocks of each pack.
pub fn compute_sensitivities(plan: &PackPlan, scores: &[f64], losses: &[f64]) -> Result<SensitivityReport> {
    let n = plan.block_count();
    if scores.len() != n || losses.len() != n {
        return Err(Error::InvalidArgument(format!(
            "plan covers {n} blocks but got {} scores and {} losses",
            scores.len(),
            losses.len()
        )));
    }
    plan.validate(n)?;
    let packs = plan
        .packs
        .iter()
        .map(|&(lo, hi)| {
            let s = scores[lo - 1..hi].to_vec();
            let l = losses[lo - 1..hi].to_vec();
            let omega = s.iter().zip(&l).map(|(a, b)| a * b).sum::<f64>() / (hi - lo + 1) as f64;
            PackSensitivity {
                range: (lo, hi),
                omega,
                scores: s,
                losses: l,
            }
        })
        .collect();
    Ok(SensitivityReport { packs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackBits {
    pub range: (usize, usize),
    pub omega: f64,
    pub p: u64,
    pub bits: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitAllocation {
    #[serde(rename = "K")]
    pub candidates: Vec<u32>,
    #[serde(rename = "C")]
    pub budget: u64,
    pub packs: Vec<PackBits>,
    pub objective: f64,
    pub cost: u64,
    /// `cost / sum(p)`.
    pub avg_bits: f64,
}

impl BitAllocation {
    pub fn bits(&self) -> Vec<u32> {
        self.packs.iter().map(|p| p.bits).collect()
    }

    /// Weight bits of every block under `plan`.
    pub fn block_bits(&self, plan: &PackPlan) -> Result<Vec<u32>> {
        if plan.packs.len() != self.packs.len() {
            return Err(Error::InvalidArgument(format!(
                "allocation has {} packs, plan has {}",
                self.packs.len(),
                plan.packs.len()
            )));
        }
        Ok(plan
            .pack_of_block()
            .into_iter()
            .map(|j| self.packs[j].bits)
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: Self = serde_json::from_str(text).map_err(|e| Error::schema("/", e.to_string()))?;
        for (j, p) in a.packs.iter().enumerate() {
            if !a.candidates.contains(&p.bits) {
                return Err(Error::schema(
                    format!("/packs/{j}/bits"),
                    format!("{} bits not in candidate set {:?}", p.bits, a.candidates),
                ));
            }
        }
        if a.cost > a.budget {
            return Err(Error::schema("/cost", format!("cost {} exceeds budget {}", a.cost, a.budget)));
        }
        Ok(a)
    }
}

/// Uniform allocation of `bits` to every pack, recorded in allocation form.
pub fn uniform_allocation(report: &SensitivityReport, p: &[u64], bits: u32) -> Result<BitAllocation> {
    let choice = vec![bits; p.len()];
    let cost: u64 = p.iter().map(|&pj| pj * bits as u64).sum();
    build(report, p, &[bits], cost, &choice)
}

fn check_instance(report: &SensitivityReport, p: &[u64], candidates: &[u32]) -> Result<Vec<u32>> {
    if report.packs.len() != p.len() {
        return Err(Error::InvalidArgument(format!(
            "{} sensitivities vs {} parameter counts",
            report.packs.len(),
            p.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::InvalidArgument("no packs to allocate".into()));
    }
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("empty candidate bit-width set".into()));
    }
    if let Some(o) = report.packs.iter().find(|s| !s.omega.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite sensitivity for pack {:?}",
            o.range
        )));
    }
    let mut k = candidates.to_vec();
    for &b in &k {
        check_bits(b)?;
    }
    k.sort_unstable();
    k.dedup();
    Ok(k)
}

fn feasibility(p: &[u64], k: &[u32], budget: u64) -> Result<()> {
    let min_cost: u64 = p.iter().map(|&pj| pj * k[0] as u64).sum();
    if min_cost > budget {
        return Err(Error::Infeasible { budget, min_cost });
    }
    Ok(())
}

fn objective(report: &SensitivityReport, choice: &[u32]) -> f64 {
    report
        .packs
        .iter()
        .zip(choice)
        .map(|(s, &b)| b as f64 * s.omega)
        .fold(0.0, |acc, v| acc + v)
}

fn build(report: &SensitivityReport, p: &[u64], k: &[u32], budget: u64, choice: &[u32]) -> Result<BitAllocation> {
    let cost: u64 = p.iter().zip(choice).map(|(&pj, &b)| pj * b as u64).sum();
    let total: u64 = p.iter().sum();
    Ok(BitAllocation {
        candidates: k.to_vec(),
        budget,
        packs: report
            .packs
            .iter()
            .zip(p)
            .zip(choice)
            .map(|((s, &pj), &bits)| PackBits {
                range: s.range,
                omega: s.omega,
                p: pj,
                bits,
            })
            .collect(),
        objective: objective(report, choice),
        cost,
        avg_bits: cost as f64 / total.max(1) as f64,
    })
}

/// Whether `(obj, cost, vec)` beats the incumbent: higher objective, then
/// lower cost, then lexicographically smaller vector.
fn better(obj: f64, cost: u64, v: &[u32], best: &(f64, u64, Vec<u32>)) -> bool {
    if obj != best.0 {
        return obj > best.0;
    }
    if cost != best.1 {
        return cost < best.1;
    }
    v < best.2.as_slice()
}

/// Exact solution by dynamic programming over the integer cost axis. For
/// each reachable cost the best prefix (highest partial objective, then
/// lexicographically smallest) is kept.
pub fn allocate_bits(report: &SensitivityReport, p: &[u64], candidates: &[u32], budget: u64) -> Result<BitAllocation> {
    let k = check_instance(report, p, candidates)?;
    feasibility(p, &k, budget)?;
    let mut states: BTreeMap<u64, (f64, Vec<u32>)> = BTreeMap::new();
    states.insert(0, (0.0, Vec::new()));
    for (j, s) in report.packs.iter().enumerate() {
        let mut next: BTreeMap<u64, (f64, Vec<u32>)> = BTreeMap::new();
        let rest_min: u64 = p[j + 1..].iter().map(|&pj| pj * k[0] as u64).sum();
        for (&cost, (obj, prefix)) in &states {
            for &b in &k {
                let c = cost + p[j] * b as u64;
                if c + rest_min > budget {
                    continue;
                }
                let o = obj + b as f64 * s.omega;
                let mut v = prefix.clone();
                v.push(b);
                match next.get(&c) {
                    Some((bo, bv)) if !(o > *bo || (o == *bo && v < *bv)) => {}
                    _ => {
                        next.insert(c, (o, v));
                    }
                }
            }
        }
        states = next;
    }
    let mut best: Option<(f64, u64, Vec<u32>)> = None;
    for (cost, (obj, v)) in states {
        if best.as_ref().is_none_or(|b| better(obj, cost, &v, b)) {
            best = Some((obj, cost, v));
        }
    }
    let (_, _, choice) = best.expect("feasible instance has a solution");
    build(report, p, &k, budget, &choice)
}

/// Exhaustive enumeration with the same tie rules as [`allocate_bits`].
pub fn allocate_bits_bruteforce(
    report: &SensitivityReport,
    p: &[u64],
    candidates: &[u32],
    budget: u64,
) -> Result<BitAllocation> {
    let k = check_instance(report, p, candidates)?;
    let space = (k.len() as u64).checked_pow(p.len() as u32);
    if space.is_none_or(|s| s > BRUTEFORCE_LIMIT) {
        return Err(Error::InvalidArgument(format!(
            "{}^{} combinations exceed the enumeration limit {BRUTEFORCE_LIMIT}",
            k.len(),
            p.len()
        )));
    }
    feasibility(p, &k, budget)?;
    let m = p.len();
    let mut idx = vec![0usize; m];
    let mut best: Option<(f64, u64, Vec<u32>)> = None;
    loop {
        let v: Vec<u32> = idx.iter().map(|&i| k[i]).collect();
        let cost: u64 = p.iter().zip(&v).map(|(&pj, &b)| pj * b as u64).sum();
        if cost <= budget {
            let obj = objective(report, &v);
            if best.as_ref().is_none_or(|b| better(obj, cost, &v, b)) {
                best = Some((obj, cost, v));
            }
        }
        // Odometer increment, last position fastest.
        let mut pos = m;
        loop {
            if pos == 0 {
                let (_, _, choice) = best.expect("feasible instance has a solution");
                return build(report, p, &k, budget, &choice);
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < k.len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// Candidate set bracketing a nominal weight bit-width.
pub fn default_candidates(nominal: u32) -> Vec<u32> {
    match nominal {
        2 => vec![2, 3, 4],
        3 => vec![2, 3, 4],
        4 => vec![3, 4, 8],
        b if b >= 32 => vec![32],
        b => vec![b - 1, b, (b * 2).min(16)],
    }
}
