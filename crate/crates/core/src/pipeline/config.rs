//! Versioned run configuration with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::allocation::default_candidates;
use crate::error::{Error, Result};
use crate::importance::PerturbationConfig;
use crate::model::{DatasetKind, TrainConfig};
use crate::quant::check_bits;
use crate::reconstruct::ReconstructionConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Which synthetic dataset to draw calibration and test splits from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default = "default_samples")]
    pub n: usize,
    #[serde(default = "default_data_seed")]
    pub seed: u64,
    #[serde(default)]
    pub classes: Option<usize>,
}

fn default_samples() -> usize {
    1024
}

fn default_data_seed() -> u64 {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoBudget {
    Auto,
}

/// Memory budget in bits: `"auto"` means nominal weight bits times the
/// total block parameter count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Budget {
    Bits(u64),
    Auto(AutoBudget),
}

impl Default for Budget {
    fn default() -> Self {
        Budget::Auto(AutoBudget::Auto)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyName {
    Hada,
    Random,
    Fixed,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackingConfig {
    pub strategy: StrategyName,
    /// Pack size for `fixed`.
    #[serde(default)]
    pub size: Option<usize>,
    /// Pack count for `random`; defaults to the number of HAda packs.
    #[serde(default)]
    pub packs: Option<usize>,
    #[serde(default)]
    pub max_pack_size: Option<usize>,
}

impl Default for PackingConfig {
    fn default() -> Self {
        PackingConfig {
            strategy: StrategyName::Hada,
            size: None,
            packs: None,
            max_pack_size: None,
        }
    }
}

/// Model construction and training for `gen-model`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub arch: String,
    #[serde(default)]
    pub init_seed: u64,
    pub train_data: DatasetSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Grid of ablation cells, each `"<strategy>/<precision>"` with strategy in
/// `none`, `random`, `hada`, `fixed-<size>` and precision `uniform` or `mp`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub cells: Vec<String>,
    #[serde(default = "default_ablation_seeds")]
    pub seeds: Vec<u64>,
    /// Adds a MinMax-only row (no reconstruction).
    #[serde(default = "yes")]
    pub minmax_baseline: bool,
}

fn default_ablation_seeds() -> Vec<u64> {
    (0..5).collect()
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            cells: ["none/uniform", "random/uniform", "hada/uniform", "hada/mp"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            seeds: default_ablation_seeds(),
            minmax_baseline: true,
        }
    }
}

fn yes() -> bool {
    true
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/latest")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: PathBuf,
    pub dataset: DatasetSpec,
    pub weight_bits: u32,
    pub act_bits: u32,
    /// Candidate weight bit-widths; defaults bracket `weight_bits`.
    #[serde(default)]
    pub candidates: Option<Vec<u32>>,
    #[serde(default)]
    pub budget: Budget,
    /// Bits of stem and head weights; defaults to the largest candidate.
    #[serde(default)]
    pub edge_bits: Option<u32>,
    #[serde(default)]
    pub packing: PackingConfig,
    #[serde(default = "yes")]
    pub mixed_precision: bool,
    #[serde(default)]
    pub perturbation: PerturbationConfig,
    /// Samples on which block quantization losses are measured.
    #[serde(default = "default_loss_samples")]
    pub loss_samples: usize,
    #[serde(default = "yes")]
    pub reconstruct: bool,
    #[serde(default)]
    pub reconstruction: ReconstructionConfig,
    /// Run seed; copied into the perturbation, reconstruction and random
    /// packing seeds.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenerateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationConfig>,
}

fn default_loss_samples() -> usize {
    256
}

/// Parses `KEY=VALUE`; the value is read as JSON when possible and as a
/// plain string otherwise.
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {text:?} is not KEY=VALUE")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override key {key:?} is not a dotted path")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Sets `root.a.b.c = value`, creating intermediate objects.
pub fn apply_override(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!("override {key}: {} is not an object", parts[..i].join(".")))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one part")
}

impl RunConfig {
    /// Parses a config document, applies overrides and validates. A relative
    /// model path resolves against `base`.
    pub fn from_value(mut doc: Value, base: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        if let Some(base) = base {
            if let Some(Value::String(p)) = doc.get("model") {
                if Path::new(p).is_relative() {
                    doc["model"] = Value::String(base.join(p).to_string_lossy().into_owned());
                }
            }
        }
        for (k, v) in overrides {
            apply_override(&mut doc, k, v.clone())?;
        }
        let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, Value)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let doc: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_value(doc, path.parent(), overrides)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.propagate_seed();
    }

    fn propagate_seed(&mut self) {
        self.perturbation.seed = self.seed;
        self.reconstruction.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let cfg_err = |e: Error| Error::Config(e.to_string());
        check_bits(self.weight_bits).map_err(cfg_err)?;
        check_bits(self.act_bits).map_err(cfg_err)?;
        for &b in &self.candidate_set() {
            check_bits(b).map_err(cfg_err)?;
        }
        if self.candidate_set().is_empty() {
            return Err(Error::Config("candidate set is empty".into()));
        }
        check_bits(self.edge_bits()).map_err(cfg_err)?;
        self.perturbation.validate().map_err(cfg_err)?;
        if self.loss_samples == 0 {
            return Err(Error::Config("loss_samples must be at least 1".into()));
        }
        match self.packing.strategy {
            StrategyName::Fixed if self.packing.size.unwrap_or(0) == 0 => {
                return Err(Error::Config("fixed packing needs packing.size >= 1".into()))
            }
            _ => {}
        }
        if let Some(a) = &self.ablation {
            for c in &a.cells {
                super::ablate::parse_cell(c)?;
            }
            if a.seeds.is_empty() {
                return Err(Error::Config("ablation needs at least one seed".into()));
            }
        }
        Ok(())
    }

    /// Configured candidate set, or the default bracketing the nominal bits.
    pub fn candidate_set(&self) -> Vec<u32> {
        let mut k = self.candidates.clone().unwrap_or_else(|| default_candidates(self.weight_bits));
        k.sort_unstable();
        k.dedup();
        k
    }

    /// Bit-widths the allocator may choose from: the candidate set under
    /// mixed precision, else the nominal bits alone.
    pub fn candidates(&self) -> Vec<u32> {
        if self.mixed_precision {
            self.candidate_set()
        } else {
            vec![self.weight_bits]
        }
    }

    /// Stem and head bits; defaults to the largest candidate so uniform and
    /// mixed-precision runs share the same edge layers.
    pub fn edge_bits(&self) -> u32 {
        self.edge_bits
            .unwrap_or_else(|| self.candidate_set().into_iter().max().unwrap_or(self.weight_bits))
    }

    /// Budget in bits for blocks holding `total_params` weights.
    pub fn resolve_budget(&self, total_params: u64) -> u64 {
        match self.budget {
            Budget::Bits(c) => c,
            Budget::Auto(_) => self.weight_bits as u64 * total_params,
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
