//! End-to-end orchestration: score, pack, allocate, quantize, reconstruct,
//! evaluate and report, driven by a single [`RunConfig`].
//!
//! Every stage writes its artifact into the output directory as soon as it
//! finishes; a failing stage leaves the earlier artifacts in place together
//! with a `stage-failed.json` marker naming the stage.

mod ablate;
mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use ablate::{parse_cell, run_ablation, AblationCell, AblationReport, AblationRow, Precision};
pub use config::{
    apply_override, parse_override, AblationConfig, AutoBudget, Budget, DatasetSpec, GenerateConfig,
    PackingConfig, RunConfig, StrategyName, CONFIG_VERSION,
};

use crate::allocation::{
    allocate_bits, block_quant_losses, compute_sensitivities, uniform_allocation, BitAllocation,
    SensitivityReport,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, AccuracyReport};
use crate::importance::{score_all_blocks, BlockScoreReport};
use crate::model::{
    build_model, deserialize, generate_dataset, serialize, train, ArchSpec, DatasetSplit, Network,
    TrainReport,
};
use crate::packing::{
    apply_size_cap, partition_fixed, partition_hada, partition_none, partition_random, PackPlan,
};
use crate::quant::{quantize_network, ActivationRanges, BitPlan, QuantizedModel};
use crate::reconstruct::{reconstruct_pack, ReconstructionTrace};

pub const REPORT_FORMAT: &str = "packptq-run-report";
pub const REPORT_VERSION: u32 = 1;
pub const FAILURE_MARKER: &str = "stage-failed.json";

/// Key of every timing field; these are the only run-to-run differences.
pub const TIMING_KEY: &str = "wall_time_ms";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Load,
    Score,
    Pack,
    Allocate,
    Quantize,
    Reconstruct,
    Evaluate,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::Score => "score",
            Stage::Pack => "pack",
            Stage::Allocate => "allocate",
            Stage::Quantize => "quantize",
            Stage::Reconstruct => "reconstruct",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

/// Model and data a run operates on.
pub struct Inputs {
    pub network: Network<f64>,
    pub data: DatasetSplit<f64>,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn pretty<S: Serialize>(value: &S) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    write(path, &pretty(value)?)
}

pub fn load_model(path: &Path) -> Result<Network<f64>> {
    let text = read(path)?;
    deserialize(&text).map_err(|e| match e {
        Error::Schema { path: p, message } => Error::Schema {
            path: p,
            message: format!("{message} (in {})", path.display()),
        },
        other => other,
    })
}

pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let network = load_model(&cfg.model)?;
    let d = &cfg.dataset;
    let data = generate_dataset(d.kind, d.classes, d.n, d.seed).map_err(|e| Error::Config(e.to_string()))?;
    if data.calibration.class_count != network.class_count {
        return Err(Error::Config(format!(
            "dataset has {} classes but model {} predicts {}",
            data.calibration.class_count,
            cfg.model.display(),
            network.class_count
        )));
    }
    Ok(Inputs { network, data })
}

/// Everything a run has produced so far.
#[derive(Default)]
pub struct RunState {
    pub scores: Option<BlockScoreReport>,
    pub plan: Option<PackPlan>,
    pub ranges: Option<ActivationRanges<f64>>,
    pub sensitivities: Option<SensitivityReport>,
    pub allocation: Option<BitAllocation>,
    pub bits: Option<BitPlan>,
    pub quantized: Option<QuantizedModel<f64>>,
    pub traces: Vec<ReconstructionTrace>,
    pub fp_accuracy: Option<AccuracyReport>,
    pub quantized_accuracy: Option<AccuracyReport>,
    pub report: Option<RunReport>,
    pub wall_time_ms: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub packptq: String,
    pub report: u32,
    pub config: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Versions {
            packptq: env!("CARGO_PKG_VERSION").to_string(),
            report: REPORT_VERSION,
            config: CONFIG_VERSION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub versions: Versions,
    pub seed: u64,
    /// The resolved config, without the output directory.
    pub config: Value,
    pub scores: BlockScoreReport,
    pub plan: PackPlan,
    pub sensitivities: SensitivityReport,
    pub allocation: BitAllocation,
    pub bits: BitPlan,
    pub traces: Vec<ReconstructionTrace>,
    pub fp_accuracy: AccuracyReport,
    pub quantized_accuracy: AccuracyReport,
    /// Average weight bits over block parameters.
    pub avg_bits: f64,
    pub wall_time_ms: BTreeMap<String, u64>,
}

/// Removes every timing field, recursively.
pub fn strip_timing(value: &mut Value) {
    match value {
        Value::Object(map) => {
            map.remove(TIMING_KEY);
            map.values_mut().for_each(strip_timing);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text).map_err(|e| Error::schema("/", e.to_string()))?;
        if report.format != REPORT_FORMAT {
            return Err(Error::schema("/format", format!("expected {REPORT_FORMAT:?}")));
        }
        Ok(report)
    }

    /// Serialization with timing fields removed; equal across repeated runs
    /// of the same config.
    pub fn canonical_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        strip_timing(&mut v);
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

fn config_echo(cfg: &RunConfig) -> Value {
    let mut v = cfg.to_value();
    if let Value::Object(map) = &mut v {
        map.remove("out");
    }
    v
}

fn stage_pack(cfg: &RunConfig, scores: &[f64]) -> Result<PackPlan> {
    let n = scores.len();
    let p = &cfg.packing;
    let mut plan = match p.strategy {
        StrategyName::Hada => partition_hada(scores)?,
        StrategyName::None => partition_none(n)?,
        StrategyName::Fixed => partition_fixed(n, p.size.unwrap_or(0))?,
        StrategyName::Random => {
            let count = match p.packs {
                Some(k) => k,
                None => partition_hada(scores)?.packs.len(),
            };
            partition_random(n, count, cfg.seed)?
        }
    };
    plan.scores = scores.to_vec();
    if let Some(max) = p.max_pack_size {
        plan = apply_size_cap(plan, max, scores)?;
    }
    Ok(plan)
}

fn pack_params(network: &Network<f64>, plan: &PackPlan) -> Vec<u64> {
    let counts = network.param_counts();
    plan.packs
        .iter()
        .map(|&(lo, hi)| counts[lo - 1..hi].iter().sum::<usize>() as u64)
        .collect()
}

fn stage_allocate(
    cfg: &RunConfig,
    inputs: &Inputs,
    plan: &PackPlan,
    scores: &[f64],
) -> Result<(ActivationRanges<f64>, SensitivityReport, BitAllocation)> {
    let net = &inputs.network;
    let calib = &inputs.data.calibration;
    let ranges = ActivationRanges::calibrate(net, &calib.inputs)?;
    let loss_set = calib.head(cfg.loss_samples.min(calib.len()))?;
    let losses = block_quant_losses(net, &loss_set, &ranges, cfg.weight_bits)?;
    let sens = compute_sensitivities(plan, scores, &losses)?;
    let p = pack_params(net, plan);
    let budget = cfg.resolve_budget(p.iter().sum());
    let alloc = if cfg.mixed_precision {
        allocate_bits(&sens, &p, &cfg.candidates(), budget)?
    } else {
        let a = uniform_allocation(&sens, &p, cfg.weight_bits)?;
        if a.cost > budget {
            return Err(Error::Infeasible {
                budget,
                min_cost: a.cost,
            });
        }
        BitAllocation { budget, ..a }
    };
    Ok((ranges, sens, alloc))
}

/// Runs the stages up to and including `until`. With `out`, every stage's
/// artifact is written there and failures leave a stage marker.
pub fn execute(cfg: &RunConfig, until: Stage, out: Option<&Path>) -> Result<RunState> {
    if let Some(dir) = out {
        let marker = dir.join(FAILURE_MARKER);
        if marker.exists() {
            std::fs::remove_file(&marker).map_err(|source| Error::Io {
                path: marker.display().to_string(),
                source,
            })?;
        }
    }
    let mut state = RunState::default();
    let mut current = Stage::Load;
    let result = run_stages(cfg, until, out, &mut state, &mut current);
    match result {
        Ok(()) => Ok(state),
        Err(e) => {
            if let Some(dir) = out {
                let marker = serde_json::json!({
                    "stage": current.name(),
                    "error": e.to_string(),
                    "numerical": e.is_numerical(),
                });
                // The original error matters more than a failed marker write.
                let _ = write_json(&dir.join(FAILURE_MARKER), &marker);
            }
            Err(e)
        }
    }
}

fn run_stages(
    cfg: &RunConfig,
    until: Stage,
    out: Option<&Path>,
    state: &mut RunState,
    current: &mut Stage,
) -> Result<()> {
    let emit = |name: &str, text: String| -> Result<()> {
        match out {
            Some(dir) => write(&dir.join(name), &text),
            None => Ok(()),
        }
    };
    let mut clock = Instant::now();
    let mut lap = |state: &mut RunState, stage: Stage| {
        state.wall_time_ms.insert(stage.name().to_string(), clock.elapsed().as_millis() as u64);
        clock = Instant::now();
    };

    *current = Stage::Load;
    let inputs = load_inputs(cfg)?;
    let n = inputs.network.block_count();
    lap(state, Stage::Load);

    *current = Stage::Score;
    let scores = score_all_blocks(&inputs.network, &inputs.data.calibration, &cfg.perturbation)?;
    emit("scores.json", pretty(&scores)?)?;
    let s = scores.scores();
    state.scores = Some(scores);
    lap(state, Stage::Score);
    if until == Stage::Score {
        return Ok(());
    }

    *current = Stage::Pack;
    let plan = stage_pack(cfg, &s)?;
    emit("plan.json", pretty(&plan)?)?;
    state.plan = Some(plan.clone());
    lap(state, Stage::Pack);
    if until == Stage::Pack {
        return Ok(());
    }

    *current = Stage::Allocate;
    let (ranges, sens, alloc) = stage_allocate(cfg, &inputs, &plan, &s)?;
    emit("sensitivities.json", pretty(&sens)?)?;
    emit("allocation.json", pretty(&alloc)?)?;
    let bits = BitPlan {
        weight_bits: alloc.block_bits(&plan)?,
        act_bits: vec![cfg.act_bits; n],
        edge_bits: cfg.edge_bits(),
    };
    state.sensitivities = Some(sens);
    state.allocation = Some(alloc);
    lap(state, Stage::Allocate);
    if until == Stage::Allocate {
        state.ranges = Some(ranges);
        return Ok(());
    }

    *current = Stage::Quantize;
    let mut q = quantize_network(&inputs.network, &bits, &ranges)?;
    emit("bit-plan.json", pretty(&bits)?)?;
    emit("quantized-model.json", q.to_json()?)?;
    state.ranges = Some(ranges);
    state.bits = Some(bits);
    lap(state, Stage::Quantize);
    if until == Stage::Quantize {
        state.quantized = Some(q);
        return Ok(());
    }

    *current = Stage::Reconstruct;
    if cfg.reconstruct {
        for &pack in &plan.packs {
            let trace = reconstruct_pack(
                &inputs.network,
                &mut q,
                pack,
                &inputs.data.calibration,
                &cfg.reconstruction,
            )?;
            state.traces.push(trace);
        }
        emit("traces.json", pretty(&state.traces)?)?;
        emit("quantized-model.json", q.to_json()?)?;
    }
    lap(state, Stage::Reconstruct);
    if until == Stage::Reconstruct {
        state.quantized = Some(q);
        return Ok(());
    }

    *current = Stage::Evaluate;
    let fp = evaluate_model(&inputs.network, &inputs.data.test)?;
    let qa = evaluate_model(&q, &inputs.data.test)?;
    emit("accuracy.json", pretty(&serde_json::json!({"full_precision": fp, "quantized": qa}))?)?;
    state.quantized = Some(q);
    lap(state, Stage::Evaluate);
    if until == Stage::Evaluate {
        state.fp_accuracy = Some(fp);
        state.quantized_accuracy = Some(qa);
        return Ok(());
    }

    *current = Stage::Report;
    let alloc = state.allocation.clone().expect("allocation stage ran");
    let report = RunReport {
        format: REPORT_FORMAT.to_string(),
        versions: Versions::default(),
        seed: cfg.seed,
        config: config_echo(cfg),
        scores: state.scores.clone().expect("score stage ran"),
        plan,
        sensitivities: state.sensitivities.clone().expect("allocation stage ran"),
        avg_bits: alloc.avg_bits,
        allocation: alloc,
        bits: state.bits.clone().expect("quantize stage ran"),
        traces: state.traces.clone(),
        fp_accuracy: fp.clone(),
        quantized_accuracy: qa.clone(),
        wall_time_ms: state.wall_time_ms.clone(),
    };
    state.fp_accuracy = Some(fp);
    state.quantized_accuracy = Some(qa);
    emit("report.json", pretty(&report)?)?;
    state.report = Some(report);
    Ok(())
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.clone()
}

pub fn cmd_score(cfg: &RunConfig) -> Result<BlockScoreReport> {
    Ok(execute(cfg, Stage::Score, Some(&out_dir(cfg)))?.scores.expect("score stage ran"))
}

pub fn cmd_pack(cfg: &RunConfig) -> Result<PackPlan> {
    Ok(execute(cfg, Stage::Pack, Some(&out_dir(cfg)))?.plan.expect("pack stage ran"))
}

pub fn cmd_allocate(cfg: &RunConfig) -> Result<BitAllocation> {
    Ok(execute(cfg, Stage::Allocate, Some(&out_dir(cfg)))?
        .allocation
        .expect("allocation stage ran"))
}

/// MinMax quantization under the allocated bits, without reconstruction.
pub fn cmd_quantize(cfg: &RunConfig) -> Result<QuantizedModel<f64>> {
    Ok(execute(cfg, Stage::Quantize, Some(&out_dir(cfg)))?
        .quantized
        .expect("quantize stage ran"))
}

pub fn cmd_reconstruct(cfg: &RunConfig) -> Result<(QuantizedModel<f64>, Vec<ReconstructionTrace>)> {
    let state = execute(cfg, Stage::Reconstruct, Some(&out_dir(cfg)))?;
    Ok((state.quantized.expect("reconstruct stage ran"), state.traces))
}

pub fn cmd_pipeline(cfg: &RunConfig) -> Result<RunReport> {
    Ok(execute(cfg, Stage::Report, Some(&out_dir(cfg)))?
        .report
        .expect("report stage ran"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: PathBuf,
    pub full_precision: AccuracyReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantized_model: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantized: Option<AccuracyReport>,
}

/// Test accuracy of the configured model and, optionally, of a quantized
/// model document.
pub fn cmd_eval(cfg: &RunConfig, quantized: Option<&Path>) -> Result<EvalReport> {
    let inputs = load_inputs(cfg)?;
    let full_precision = evaluate_model(&inputs.network, &inputs.data.test)?;
    let q = match quantized {
        Some(path) => {
            let model = QuantizedModel::<f64>::from_json(&read(path)?)?;
            Some(evaluate_model(&model, &inputs.data.test)?)
        }
        None => None,
    };
    let report = EvalReport {
        model: cfg.model.clone(),
        full_precision,
        quantized_model: quantized.map(Path::to_path_buf),
        quantized: q,
    };
    write_json(&out_dir(cfg).join("eval.json"), &report)?;
    Ok(report)
}

/// Writes the configured dataset's calibration and test splits.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<DatasetSplit<f64>> {
    let d = &cfg.dataset;
    let data = generate_dataset(d.kind, d.classes, d.n, d.seed).map_err(|e| Error::Config(e.to_string()))?;
    write(&out_dir(cfg).join("dataset.json"), &data.to_json()?)?;
    Ok(data)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerateReport {
    pub arch: String,
    pub init_seed: u64,
    pub train_data: DatasetSpec,
    pub train: TrainReport,
    /// Test accuracy on the run dataset.
    pub test_accuracy: f64,
}

/// Builds and trains the model described by `cfg.generate`, writing
/// `model.json` and `train-report.json`.
pub fn cmd_gen_model(cfg: &RunConfig) -> Result<(Network<f64>, GenerateReport)> {
    let gen = cfg
        .generate
        .as_ref()
        .ok_or_else(|| Error::Config("gen-model needs a `generate` section".into()))?;
    let d = &gen.train_data;
    let train_set =
        generate_dataset::<f64>(d.kind, d.classes, d.n, d.seed).map_err(|e| Error::Config(e.to_string()))?;
    let spec = ArchSpec::new(&gen.arch, 2, train_set.calibration.class_count);
    let mut net = build_model::<f64>(&spec, gen.init_seed).map_err(|e| Error::Config(e.to_string()))?;
    let train_report = train(&mut net, &train_set.calibration, &gen.train)?;
    let e = &cfg.dataset;
    let eval_set = generate_dataset::<f64>(e.kind, e.classes, e.n, e.seed).map_err(|e| Error::Config(e.to_string()))?;
    let test_accuracy = evaluate_model(&net, &eval_set.test)?.accuracy;
    let report = GenerateReport {
        arch: gen.arch.clone(),
        init_seed: gen.init_seed,
        train_data: d.clone(),
        train: train_report,
        test_accuracy,
    };
    let dir = out_dir(cfg);
    write(&dir.join("model.json"), &serialize(&net)?)?;
    write_json(&dir.join("train-report.json"), &report)?;
    Ok((net, report))
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationReport> {
    let grid = cfg.ablation.clone().unwrap_or_default();
    let report = run_ablation(cfg, &grid, Some(&out_dir(cfg)))?;
    report.write(&out_dir(cfg))?;
    Ok(report)
}
