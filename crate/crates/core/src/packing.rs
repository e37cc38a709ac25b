//! Partitions of the block sequence into contiguous packs.
//!
//! Packs are 1-based inclusive block ranges `(lo, hi)` in ascending order.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PackingStrategy {
    /// Hessian-guided: repeatedly cut at the lowest-scoring block.
    Hada,
    Random { seed: u64, packs: usize },
    Fixed { size: usize },
    /// Every block is its own pack.
    None,
}

impl std::fmt::Display for PackingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PackingStrategy::Hada => write!(f, "hada"),
            PackingStrategy::Random { .. } => write!(f, "random"),
            PackingStrategy::Fixed { size } => write!(f, "fixed-{size}"),
            PackingStrategy::None => write!(f, "none"),
        }
    }
}

/// A pack that exceeded the size cap and was split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapSplit {
    pub original: (usize, usize),
    pub parts: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackPlan {
    pub strategy: PackingStrategy,
    pub packs: Vec<(usize, usize)>,
    #[serde(default)]
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_pack_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cap_splits: Vec<CapSplit>,
}

impl PackPlan {
    pub fn block_count(&self) -> usize {
        self.packs.last().map_or(0, |p| p.1)
    }

    /// 0-based pack index of every block.
    pub fn pack_of_block(&self) -> Vec<usize> {
        self.packs
            .iter()
            .enumerate()
            .flat_map(|(j, &(lo, hi))| std::iter::repeat_n(j, hi - lo + 1))
            .collect()
    }

    /// Checks that the packs are contiguous, ascending and cover `1..=n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut next = 1;
        for (j, &(lo, hi)) in self.packs.iter().enumerate() {
            if lo != next || hi < lo {
                return Err(Error::InvalidArgument(format!(
                    "pack {} = [{lo}, {hi}] does not continue at block {next}",
                    j + 1
                )));
            }
            next = hi + 1;
        }
        if next != n + 1 {
            return Err(Error::InvalidArgument(format!(
                "packs cover blocks 1..{} but the network has {n}",
                next - 1
            )));
        }
        if !self.scores.is_empty() && self.scores.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} scores for {n} blocks",
                self.scores.len()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text).map_err(|e| Error::schema("/", e.to_string()))?;
        plan.validate(plan.block_count())
            .map_err(|e| Error::schema("/packs", e.to_string()))?;
        Ok(plan)
    }
}

/// First index of the minimum of `scores[lo..=hi]` (0-based).
fn argmin(scores: &[f64], lo: usize, hi: usize) -> usize {
    let mut best = lo;
    for i in lo + 1..=hi {
        if scores[i] < scores[best] {
            best = i;
        }
    }
    best
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no block scores".into()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "score of block {} is {}",
            i + 1,
            scores[i]
        )));
    }
    Ok(())
}

/// Hessian-guided packing. With the search window `[1, t_e]`, the block
/// `t_min` with the lowest score (first on ties) starts a pack spanning
/// `t_min..=t_e`; then `t_e = t_min - 1` until no blocks remain.
pub fn partition_hada(scores: &[f64]) -> Result<PackPlan> {
    check_scores(scores)?;
    let mut packs = Vec::new();
    let mut end = scores.len();
    while end >= 1 {
        let t_min = argmin(scores, 0, end - 1) + 1;
        packs.push((t_min, end));
        end = t_min - 1;
    }
    packs.reverse();
    Ok(PackPlan {
        strategy: PackingStrategy::Hada,
        packs,
        scores: scores.to_vec(),
        max_pack_size: None,
        cap_splits: Vec::new(),
    })
}

/// `target` packs with `target - 1` distinct cut points drawn uniformly
/// from blocks `2..=n`.
pub fn partition_random(n: usize, target: usize, seed: u64) -> Result<PackPlan> {
    if n == 0 || target == 0 || target > n {
        return Err(Error::InvalidArgument(format!(
            "cannot form {target} packs from {n} blocks"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cuts: Vec<usize> = index::sample(&mut rng, n - 1, target - 1)
        .into_iter()
        .map(|i| i + 2)
        .collect();
    cuts.sort_unstable();
    let mut packs = Vec::with_capacity(target);
    let mut lo = 1;
    for c in cuts {
        packs.push((lo, c - 1));
        lo = c;
    }
    packs.push((lo, n));
    Ok(PackPlan {
        strategy: PackingStrategy::Random { seed, packs: target },
        packs,
        scores: Vec::new(),
        max_pack_size: None,
        cap_splits: Vec::new(),
    })
}

/// Consecutive packs of `size` blocks; the last may be smaller.
pub fn partition_fixed(n: usize, size: usize) -> Result<PackPlan> {
    if n == 0 || size == 0 {
        return Err(Error::InvalidArgument(format!(
            "fixed packing needs n >= 1 and size >= 1, got n={n}, size={size}"
        )));
    }
    let packs = (1..=n).step_by(size).map(|lo| (lo, (lo + size - 1).min(n))).collect();
    Ok(PackPlan {
        strategy: PackingStrategy::Fixed { size },
        packs,
        scores: Vec::new(),
        max_pack_size: None,
        cap_splits: Vec::new(),
    })
}

/// Every block in its own pack.
pub fn partition_none(n: usize) -> Result<PackPlan> {
    let mut plan = partition_fixed(n, 1)?;
    plan.strategy = PackingStrategy::None;
    Ok(plan)
}

/// Splits every pack longer than `max` at its lowest-scoring internal block
/// (which starts the second part; first on ties), recursively. Splits are
/// recorded on the plan.
pub fn apply_size_cap(mut plan: PackPlan, max: usize, scores: &[f64]) -> Result<PackPlan> {
    if max == 0 {
        return Err(Error::InvalidArgument("max pack size must be at least 1".into()));
    }
    check_scores(scores)?;
    plan.validate(scores.len())?;
    fn split(lo: usize, hi: usize, max: usize, scores: &[f64], out: &mut Vec<(usize, usize)>) {
        if hi - lo < max {
            out.push((lo, hi));
            return;
        }
        // Cut before the lowest-scoring block other than the first.
        let cut = argmin(scores, lo, hi - 1) + 1;
        split(lo, cut - 1, max, scores, out);
        split(cut, hi, max, scores, out);
    }
    let mut packs = Vec::new();
    for &(lo, hi) in &plan.packs {
        let mut parts = Vec::new();
        split(lo, hi, max, scores, &mut parts);
        if parts.len() > 1 {
            plan.cap_splits.push(CapSplit {
                original: (lo, hi),
                parts: parts.clone(),
            });
        }
        packs.extend(parts);
    }
    plan.packs = packs;
    plan.max_pack_size = Some(max);
    Ok(plan)
}
