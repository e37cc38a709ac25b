//! Checks shared by the integration tests and the acceptance runner. Each
//! returns a one-line summary on success and a description of the first
//! violation on failure.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use packptq::allocation::{allocate_bits, allocate_bits_bruteforce, PackSensitivity, SensitivityReport};
use packptq::autodiff::{Graph, Var};
use packptq::finite_diff::finite_diff_gradient;
use packptq::importance::{
    block_hessian_mean_oracle, estimate_block_score, estimate_score, hessian_mean_oracle, PerturbationConfig,
    QuadraticForm,
};
use packptq::model::Network;
use packptq::packing::{partition_hada, partition_none, PackPlan};
use packptq::pipeline::{self, RunConfig};
use packptq::quant::{dequantize, fake_quant, quantize, BitPlan, QuantParams};
use packptq::reconstruct::reconstruct_network;
use packptq::tensor::Tensor;
use packptq::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Check = Result<String, String>;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn fixture_config(name: &str, overrides: &[&str]) -> RunConfig {
    let ov: Vec<_> = overrides
        .iter()
        .map(|o| pipeline::parse_override(o).expect("valid override"))
        .collect();
    RunConfig::load(&fixture(&format!("{name}.json")), &ov).expect("fixture config loads")
}

pub fn fixture_inputs(name: &str) -> pipeline::Inputs {
    pipeline::load_inputs(&fixture_config(name, &[])).expect("fixture loads")
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| std * normal(rng)).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// Importance estimator against finite-difference and analytic oracles.

/// Symmetric `n x n` matrix with unit mean diagonal plus noise.
fn random_hessian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let m: Vec<f64> = (0..n * n).map(|_| normal(rng) / (n as f64).sqrt()).collect();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (m[i * n + j] + m[j * n + i]) + if i == j { 1.0 } else { 0.0 };
        }
    }
    a
}

pub fn check_estimator_quadratics(dims: &[usize], samples: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_rel: f64 = 0.0;
    for (case, &n) in dims.iter().enumerate() {
        let a = random_hessian(&mut rng, n);
        let c: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let z: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let q = QuadraticForm::new(a, c, z).map_err(|e| e.to_string())?;
        let exact = q.hessian_mean();
        let oracle = hessian_mean_oracle(&q, 1e-3).map_err(|e| e.to_string())?;
        let (est, _, _, _, se, _) = estimate_score(&q, 0.1, samples, 64, 100 + case as u64, 0).map_err(|e| e.to_string())?;
        let rel = ((est - exact) / exact).abs();
        worst_rel = worst_rel.max(rel);
        if rel > 0.05 {
            return Err(format!("dim {n}: estimate {est} vs exact {exact} (relative error {rel:.4})"));
        }
        let oracle_err = (oracle - exact).abs();
        if (est - oracle).abs() > 3.0 * (se * se + oracle_err * oracle_err).sqrt() {
            return Err(format!("dim {n}: estimate {est} +- {se} vs oracle {oracle}"));
        }
    }
    Ok(format!("{} quadratics, worst relative error {worst_rel:.4}", dims.len()))
}

/// Every block of the named fixture: estimate vs second-difference oracle
/// on the same 16 calibration items. The oracle's own error is taken as the
/// change between steps `h` and `h/2`.
pub fn check_estimator_network(name: &str, samples: usize) -> Check {
    let inputs = fixture_inputs(name);
    let net = &inputs.network;
    let calib = &inputs.data.calibration;
    let cfg = PerturbationConfig {
        num_samples: samples,
        items: 16,
        seed: 5,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    for t in 0..net.block_count() {
        let s = estimate_block_score(net, calib, t, &cfg).map_err(|e| e.to_string())?;
        let h = 1e-3;
        let o1 = block_hessian_mean_oracle(net, calib, t, 16, h).map_err(|e| e.to_string())?;
        let o2 = block_hessian_mean_oracle(net, calib, t, 16, h / 2.0).map_err(|e| e.to_string())?;
        let combined = (s.score_stderr.powi(2) + (o1 - o2).powi(2)).sqrt();
        let z = (s.score - o2).abs() / combined;
        worst = worst.max(z);
        if z > 3.0 {
            return Err(format!(
                "{name} block {}: estimate {} +- {} vs oracle {o2} ({z:.2} standard errors)",
                t + 1,
                s.score,
                s.score_stderr
            ));
        }
    }
    Ok(format!("{name}: {} blocks, worst deviation {worst:.2} standard errors", net.block_count()))
}

// ---------------------------------------------------------------------------
// Reverse mode against central differences on random composed graphs.

#[derive(Clone, Copy, Debug)]
enum Step {
    Linear,
    Gelu,
    Relu,
    Scale(f64),
    Mul,
    Add,
    Sub,
    Residual,
    Conv { out: usize },
}

#[derive(Debug)]
struct RandomGraph {
    batch: usize,
    steps: Vec<Step>,
    reduction: usize,
    labels: Vec<usize>,
    params: Vec<Tensor<f64>>,
}

impl RandomGraph {
    fn generate(rng: &mut ChaCha8Rng) -> Self {
        let batch = rng.random_range(2..5);
        let mut width = rng.random_range(2..6);
        let mut params = vec![tensor(rng, &[batch, width], 1.0)];
        let mut steps = Vec::new();
        for _ in 0..rng.random_range(2..7) {
            let step = match rng.random_range(0..9) {
                0 => {
                    let next = rng.random_range(2..6);
                    params.push(tensor(rng, &[width, next], 0.6));
                    params.push(tensor(rng, &[next], 0.3));
                    width = next;
                    Step::Linear
                }
                1 => Step::Gelu,
                2 => Step::Relu,
                3 => Step::Scale(rng.random_range(-2.0..2.0)),
                k @ 4..=6 => {
                    params.push(tensor(rng, &[batch, width], 1.0));
                    [Step::Mul, Step::Add, Step::Sub][k - 4]
                }
                7 => Step::Residual,
                _ => {
                    let out = rng.random_range(1..3);
                    if out * width > 16 {
                        Step::Gelu
                    } else {
                        params.push(tensor(rng, &[out, 1, 1, 3], 0.6));
                        width *= out;
                        Step::Conv { out }
                    }
                }
            };
            steps.push(step);
        }
        let labels = (0..batch).map(|_| rng.random_range(0..width)).collect();
        RandomGraph {
            batch,
            steps,
            reduction: rng.random_range(0..5),
            labels,
            params,
        }
    }

    fn build(&self, g: &mut Graph<f64>, params: &[Tensor<f64>]) -> packptq::Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let mut next = 1;
        let mut take = || {
            next += 1;
            vars[next - 1]
        };
        let mut h = vars[0];
        for step in &self.steps {
            h = match *step {
                Step::Linear => {
                    let w = take();
                    let b = take();
                    let m = g.matmul(h, w)?;
                    g.bias_add(m, b)?
                }
                Step::Gelu => g.gelu(h)?,
                Step::Relu => g.relu(h)?,
                Step::Scale(c) => g.scale(h, c)?,
                Step::Mul => g.mul(h, take())?,
                Step::Add => g.add(h, take())?,
                Step::Sub => g.sub(h, take())?,
                Step::Residual => {
                    let a = g.gelu(h)?;
                    g.add(h, a)?
                }
                Step::Conv { out } => {
                    let width = g.value(h).shape()[1];
                    let x = g.reshape(h, &[self.batch, 1, 1, width])?;
                    let y = g.conv2d(x, take())?;
                    g.reshape(y, &[self.batch, out * width])?
                }
            };
        }
        let loss = match self.reduction {
            0 => {
                let sq = g.mul(h, h)?;
                g.mean(sq)?
            }
            1 => g.softmax_cross_entropy(h, &self.labels)?,
            2 => g.frobenius_norm(h)?,
            3 => {
                let r = g.row_norms(h)?;
                g.sum(r)?
            }
            _ => {
                let a = g.gelu(h)?;
                let r = g.sum_rows(a)?;
                g.mean(r)?
            }
        };
        Ok((loss, vars))
    }

    fn eval(&self, params: &[Tensor<f64>]) -> packptq::Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = self.build(&mut g, params)?;
        g.value(loss).item()
    }
}

pub fn check_gradients(graphs: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut coords, mut worst_abs, mut worst_rel) = (0usize, 0.0f64, 0.0f64);
    for k in 0..graphs {
        let rg = RandomGraph::generate(&mut rng);
        let mut g = Graph::new();
        let (loss, vars) = rg.build(&mut g, &rg.params).map_err(|e| format!("graph {k}: {e}"))?;
        let grads = g.backward(loss).map_err(|e| format!("graph {k}: {e}"))?;
        for (i, &v) in vars.iter().enumerate() {
            let analytic = grads.wrt(v).map_err(|e| e.to_string())?;
            let numeric = finite_diff_gradient(
                |t| {
                    let mut ps = rg.params.clone();
                    ps[i] = t.clone();
                    rg.eval(&ps)
                },
                &rg.params[i],
                1e-5,
            )
            .map_err(|e| e.to_string())?;
            for (j, (&a, &f)) in analytic.data().iter().zip(numeric.data()).enumerate() {
                coords += 1;
                let abs = (a - f).abs();
                let rel = abs / a.abs().max(f.abs()).max(f64::MIN_POSITIVE);
                if abs > 1e-7 && rel > 1e-4 {
                    return Err(format!(
                        "graph {k} {:?} param {i}[{j}]: reverse {a} vs finite difference {f}",
                        rg.steps
                    ));
                }
                worst_abs = worst_abs.max(abs);
                if a.abs() > 1e-3 {
                    worst_rel = worst_rel.max(rel);
                }
            }
        }
    }
    Ok(format!(
        "{graphs} graphs, {coords} coordinates, worst abs error {worst_abs:.1e}, worst rel error {worst_rel:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// Packing.

pub fn check_packing_hand_cases() -> Check {
    let cases: [(&[f64], &[(usize, usize)]); 3] = [
        (&[0.5, 0.1, 0.9, 0.2, 0.7], &[(1, 1), (2, 5)]),
        (&[0.1, 0.2, 0.3, 0.4, 0.5], &[(1, 5)]),
        (&[0.5, 0.4, 0.3, 0.2, 0.1], &[(1, 1), (2, 2), (3, 3), (4, 4), (5, 5)]),
    ];
    for (scores, want) in cases {
        let got = partition_hada(scores).map_err(|e| e.to_string())?.packs;
        if got != want {
            return Err(format!("{scores:?}: got {got:?}, want {want:?}"));
        }
    }
    Ok("3 hand-traced cases".into())
}

/// Independent characterisation of the HAda plan: packs partition `1..=n`
/// and each pack starts at the first minimum of the scores up to its end.
fn hada_plan_is_valid(scores: &[f64], plan: &PackPlan) -> Result<(), String> {
    plan.validate(scores.len()).map_err(|e| e.to_string())?;
    for &(lo, hi) in &plan.packs {
        let window = &scores[..hi];
        let first_min = (0..hi).fold(0, |b, i| if window[i] < window[b] { i } else { b });
        if first_min + 1 != lo {
            return Err(format!("pack ({lo}, {hi}) does not start at the window minimum {}", first_min + 1));
        }
    }
    Ok(())
}

pub fn check_packing_property(vectors: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..vectors {
        let n = rng.random_range(1..=64);
        // Coarse values produce ties.
        let coarse = rng.random_bool(0.3);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(-5.0..5.0);
                if coarse {
                    v.round()
                } else {
                    v
                }
            })
            .collect();
        let plan = partition_hada(&scores).map_err(|e| e.to_string())?;
        hada_plan_is_valid(&scores, &plan).map_err(|e| format!("vector {k} {scores:?}: {e}"))?;
        let replay = partition_hada(&scores).map_err(|e| e.to_string())?;
        if replay != plan {
            return Err(format!("vector {k}: replay differs"));
        }
    }
    Ok(format!("{vectors} random score vectors"))
}

// ---------------------------------------------------------------------------
// Allocator.

pub fn sensitivity_report(omegas: &[f64]) -> SensitivityReport {
    SensitivityReport {
        packs: omegas
            .iter()
            .enumerate()
            .map(|(j, &omega)| PackSensitivity {
                range: (j + 1, j + 1),
                omega,
                scores: vec![],
                losses: vec![],
            })
            .collect(),
    }
}

pub fn check_allocator(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = [2u32, 3, 4, 5, 6, 8];
    let mut infeasible = 0;
    for k in 0..instances {
        let m = rng.random_range(1..=8);
        let kc = rng.random_range(1..=4);
        let mut cands: Vec<u32> = rand::seq::index::sample(&mut rng, pool.len(), kc)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        cands.sort_unstable();
        let p: Vec<u64> = (0..m).map(|_| rng.random_range(1..40)).collect();
        let ties = rng.random_bool(0.3);
        let omegas: Vec<f64> = (0..m)
            .map(|_| {
                let v: f64 = rng.random_range(0.0..1.0);
                if ties {
                    (v * 4.0).round() / 4.0
                } else {
                    v
                }
            })
            .collect();
        let report = sensitivity_report(&omegas);
        let min_cost: u64 = p.iter().map(|&x| x * cands[0] as u64).sum();
        let max_cost: u64 = p.iter().map(|&x| x * *cands.last().unwrap() as u64).sum();
        let budget = rng.random_range(min_cost.saturating_sub(5)..=max_cost + 5);
        let dp = allocate_bits(&report, &p, &cands, budget);
        let bf = allocate_bits_bruteforce(&report, &p, &cands, budget);
        match (dp, bf) {
            (Err(Error::Infeasible { min_cost: a, .. }), Err(Error::Infeasible { min_cost: b, .. })) if a == b => {
                infeasible += 1;
                if budget >= min_cost {
                    return Err(format!("instance {k}: feasible budget {budget} reported infeasible"));
                }
            }
            (Ok(dp), Ok(bf)) => {
                if dp.bits() != bf.bits() || dp.objective != bf.objective {
                    return Err(format!(
                        "instance {k} (p {p:?}, omega {omegas:?}, K {cands:?}, C {budget}): dp {:?}/{} vs enumeration {:?}/{}",
                        dp.bits(),
                        dp.objective,
                        bf.bits(),
                        bf.objective
                    ));
                }
                if dp.cost > budget {
                    return Err(format!("instance {k}: cost {} over budget {budget}", dp.cost));
                }
                let larger = budget + rng.random_range(1..50);
                let more = allocate_bits(&report, &p, &cands, larger).map_err(|e| e.to_string())?;
                if more.objective < dp.objective {
                    return Err(format!(
                        "instance {k}: objective fell from {} to {} when the budget grew {budget} -> {larger}",
                        dp.objective, more.objective
                    ));
                }
            }
            (a, b) => return Err(format!("instance {k}: dp {a:?} vs enumeration {b:?}")),
        }
    }
    Ok(format!("{instances} instances ({infeasible} infeasible), budget monotone"))
}

// ---------------------------------------------------------------------------
// Quantizer.

pub fn check_quantizer(draws: usize, seed: u64) -> Check {
    let t = |v: &[f64]| Tensor::from_f64(&[v.len()], v).unwrap();
    let p = QuantParams::per_tensor(0.5, 0.0, 2).unwrap();
    let q = quantize(&t(&[0.6, 3.0, 100.0]), &p).map_err(|e| e.to_string())?;
    if q.ints != [1, 3, 3] {
        return Err(format!("hand cases: codes {:?}, want [1, 3, 3]", q.ints));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..draws {
        let bits = rng.random_range(2..=8u32);
        let s: f64 = rng.random_range(0.01..2.0);
        let z0: f64 = rng.random_range(-5.0..5.0);
        let p = QuantParams::per_tensor(s, z0, bits).unwrap();
        let qmax = ((1u64 << bits) - 1) as f64;
        let len = rng.random_range(1..=300);
        let spread = s * qmax * rng.random_range(0.2..2.0);
        let centre = s * (qmax / 2.0 - z0);
        let mut xs: Vec<f64> = (0..len).map(|_| centre + spread * rng.random_range(-1.0..1.0)).collect();
        xs.sort_by(f64::total_cmp);
        let x = t(&xs);
        let q = quantize(&x, &p).map_err(|e| e.to_string())?;
        let y = dequantize(&q).map_err(|e| e.to_string())?;
        if fake_quant(&y, &p).map_err(|e| e.to_string())? != y {
            return Err(format!("draw {k}: not idempotent (s {s}, z0 {z0}, k {bits})"));
        }
        if q.ints.windows(2).any(|w| w[0] > w[1]) {
            return Err(format!("draw {k}: codes not monotone"));
        }
        let (lo, hi) = (s * (0.0 - z0) - s / 2.0, s * (qmax - z0) + s / 2.0);
        for (&a, &b) in xs.iter().zip(y.data()) {
            if a >= lo && a <= hi && (a - b).abs() > s / 2.0 * (1.0 + 1e-12) {
                return Err(format!("draw {k}: |{a} - {b}| exceeds s/2 = {}", s / 2.0));
            }
        }
        let mut codes = q.ints.clone();
        codes.dedup();
        if codes.len() as u64 > 1u64 << bits || q.ints.iter().any(|&c| c as f64 > qmax) {
            return Err(format!("draw {k}: {} distinct codes at {bits} bits", codes.len()));
        }
    }
    Ok(format!("hand cases + {draws} random draws"))
}

// ---------------------------------------------------------------------------
// Reconstruction and pipeline invariants on the fixtures.

pub fn check_descent(name: &str, seeds: &[u64]) -> Check {
    let mut packs = 0;
    let mut worst: f64 = 0.0;
    for &seed in seeds {
        let mut cfg = fixture_config(name, &[]);
        cfg.set_seed(seed);
        let state = pipeline::execute(&cfg, pipeline::Stage::Reconstruct, None).map_err(|e| e.to_string())?;
        for tr in &state.traces {
            packs += 1;
            let ratio = tr.final_loss / tr.initial_loss;
            worst = worst.max(ratio);
            if tr.final_loss > tr.initial_loss * 1.01 {
                return Err(format!(
                    "seed {seed} pack {:?}: loss {} -> {}",
                    tr.pack, tr.initial_loss, tr.final_loss
                ));
            }
        }
    }
    Ok(format!("{packs} pack reconstructions, worst final/initial {worst:.3}"))
}

pub fn check_bypass(name: &str) -> Check {
    let cfg = fixture_config(name, &["weight_bits=32", "act_bits=32"]);
    let state = pipeline::execute(&cfg, pipeline::Stage::Evaluate, None).map_err(|e| e.to_string())?;
    let fp = state.fp_accuracy.unwrap();
    let qa = state.quantized_accuracy.unwrap();
    let inputs = fixture_inputs(name);
    let q = state.quantized.unwrap();
    let same_logits =
        q.logits(&inputs.data.test.inputs).unwrap() == inputs.network.logits(&inputs.data.test.inputs).unwrap();
    if fp != qa || !same_logits {
        return Err(format!("bypass accuracy {} vs full precision {}", qa.accuracy, fp.accuracy));
    }
    Ok(format!("{name}: bypass accuracy {} == full precision, logits bit-identical", qa.accuracy))
}

pub fn check_singleton_equivalence(name: &str, seed: u64) -> Check {
    let cfg = fixture_config(name, &[]);
    let inputs = fixture_inputs(name);
    let net: &Network<f64> = &inputs.network;
    let calib = &inputs.data.calibration;
    let n = net.block_count();
    let bits = BitPlan::uniform(n, 3, 3, 4);
    let rc = packptq::reconstruct::ReconstructionConfig {
        seed,
        ..cfg.reconstruction.clone()
    };
    let (q1, t1) = reconstruct_network(net, &partition_none(n).unwrap(), &bits, calib, &rc).map_err(|e| e.to_string())?;
    let ranges = packptq::quant::ActivationRanges::calibrate(net, &calib.inputs).unwrap();
    let mut q2 = packptq::quant::quantize_network(net, &bits, &ranges).unwrap();
    let t2 = packptq::reconstruct::reconstruct_blockwise(net, &mut q2, calib, &rc).map_err(|e| e.to_string())?;
    if q1.to_json().unwrap() != q2.to_json().unwrap() {
        return Err("quantized models differ".into());
    }
    for (a, b) in t1.iter().zip(&t2) {
        if a.curve != b.curve || a.initial_loss != b.initial_loss || a.final_loss != b.final_loss {
            return Err(format!("traces of pack {:?} differ", a.pack));
        }
    }
    Ok(format!("{name}: {n} singleton packs bit-identical to block-wise reconstruction"))
}

pub fn check_determinism(name: &str, seed: u64) -> Check {
    let mut reports = Vec::new();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let mut cfg = fixture_config(name, &[]);
        cfg.set_seed(seed);
        cfg.out = dir.path().to_path_buf();
        pipeline::cmd_pipeline(&cfg).map_err(|e| e.to_string())?;
        let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        pipeline::strip_timing(&mut v);
        let model = std::fs::read(dir.path().join("quantized-model.json")).unwrap();
        reports.push((serde_json::to_string_pretty(&v).unwrap(), model));
    }
    if reports[0].0 != reports[1].0 {
        return Err("reports differ outside timing fields".into());
    }
    if reports[0].1 != reports[1].1 {
        return Err("quantized models differ".into());
    }
    Ok(format!("{name} seed {seed}: reports and quantized models byte-identical"))
}
