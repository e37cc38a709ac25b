//! Behaviour of the committed fixture models and the synthetic datasets.

mod common;

use common::*;
use packptq::allocation::block_quant_losses;
use packptq::eval::evaluate_model;
use packptq::importance::{block_hessian_mean_oracle, score_all_blocks, PerturbationConfig};
use packptq::model::{generate_dataset, train, Block, DatasetKind, Layer, Network, TrainConfig};
use packptq::pipeline::{self, Stage};
use packptq::quant::{quantize_network, ActivationRanges, BitPlan};
use packptq::tensor::Tensor;
use serde_json::Value;

fn regression() -> Value {
    serde_json::from_str(&std::fs::read_to_string(fixture("regression.json")).unwrap()).unwrap()
}

#[test]
fn fixtures_reach_their_recorded_full_precision_accuracy() {
    let reg = regression();
    for name in ["resmlp-8x32", "resmlp-4x16"] {
        let inputs = fixture_inputs(name);
        let acc = evaluate_model(&inputs.network, &inputs.data.test).unwrap().accuracy;
        assert_eq!(acc, reg[name]["full_precision"].as_f64().unwrap(), "{name}");
        assert!(acc >= 0.9, "{name}: {acc}");
    }
}

#[test]
fn w4a4_minmax_matches_recorded_value() {
    let reg = regression();
    for name in ["resmlp-8x32", "resmlp-4x16"] {
        let cfg = fixture_config(
            name,
            &["weight_bits=4", "act_bits=4", "reconstruct=false", "mixed_precision=false", "packing.strategy=none"],
        );
        let state = pipeline::execute(&cfg, Stage::Evaluate, None).unwrap();
        let acc = state.quantized_accuracy.unwrap().accuracy;
        assert_eq!(acc, reg[name]["w4a4_minmax"].as_f64().unwrap(), "{name}");
    }
}

#[test]
fn w3a3_hada_mp_stays_in_regression_band() {
    let reg = &regression()["resmlp-8x32"]["w3a3_hada_mp"];
    let centre = reg["median"].as_f64().unwrap();
    let tol = reg["tolerance"].as_f64().unwrap();
    for seed in [0, 3] {
        let mut cfg = fixture_config("resmlp-8x32", &[]);
        cfg.set_seed(seed);
        let acc = pipeline::execute(&cfg, Stage::Evaluate, None)
            .unwrap()
            .quantized_accuracy
            .unwrap()
            .accuracy;
        assert!((acc - centre).abs() <= tol, "seed {seed}: {acc} vs {centre} +- {tol}");
    }
}

/// Two non-residual linear blocks compose to a single affine map.
fn linear_classifier(classes: usize) -> Network<f64> {
    let layer = |i: usize, o: usize, seed: f64| Layer::Linear {
        weight: Tensor::new(vec![i, o], (0..i * o).map(|k| 0.1 * ((k as f64 + seed) * 0.7).sin()).collect()).unwrap(),
        bias: Some(Tensor::zeros(&[o])),
    };
    Network::new(
        "linear",
        vec![2],
        classes,
        vec![],
        vec![
            Block { index: 1, layers: vec![layer(2, 8, 0.0)], residual: false },
            Block { index: 2, layers: vec![layer(8, 8, 1.0)], residual: false },
        ],
        vec![layer(8, classes, 2.0)],
    )
    .unwrap()
}

#[test]
fn concentric_rings_defeat_a_linear_classifier() {
    let data = generate_dataset::<f64>(DatasetKind::ConcentricRings, None, 1024, 1).unwrap();
    let mut net = linear_classifier(3);
    let cfg = TrainConfig { max_epochs: 60, min_epochs: 60, target_accuracy: 0.0, ..Default::default() };
    train(&mut net, &data.calibration, &cfg).unwrap();
    let linear = evaluate_model(&net, &data.test).unwrap().accuracy;
    let inputs = fixture_inputs("resmlp-4x16");
    let deep = evaluate_model(&inputs.network, &inputs.data.test).unwrap().accuracy;
    assert!(linear < 0.6, "linear classifier reached {linear}");
    assert!(deep >= 0.9, "resmlp-4x16 reached {deep}");
}

#[test]
fn fewer_bits_hurt_more() {
    let inputs = fixture_inputs("resmlp-8x32");
    let net = &inputs.network;
    let n = net.block_count();
    let ranges = ActivationRanges::calibrate(net, &inputs.data.calibration.inputs).unwrap();
    let acc = |b| {
        let q = quantize_network(net, &BitPlan::uniform(n, b, b, b), &ranges).unwrap();
        evaluate_model(&q, &inputs.data.test).unwrap().accuracy
    };
    let (a2, a4) = (acc(2), acc(4));
    assert!(a2 < a4, "W2 {a2} vs W4 {a4}");

    let calib = inputs.data.calibration.head(256).unwrap();
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let l2 = mean(block_quant_losses(net, &calib, &ranges, 2).unwrap());
    let l4 = mean(block_quant_losses(net, &calib, &ranges, 4).unwrap());
    assert!(l2 > l4 && l4 > 0.0, "mean block loss increase: k=2 {l2}, k=4 {l4}");
}

#[test]
fn identity_blocks_share_one_hessian() {
    let inputs = fixture_inputs("resmlp-4x16");
    let mut net = inputs.network.clone();
    // Zero residual branches: every block passes its input through unchanged.
    for block in &mut net.blocks {
        for layer in &mut block.layers {
            if let Some(w) = layer.weight_mut() {
                w.data_mut().fill(0.0);
            }
            if let Some(b) = layer.bias_mut() {
                b.data_mut().fill(0.0);
            }
        }
    }
    let calib = &inputs.data.calibration;
    let oracle: Vec<f64> = (0..net.block_count())
        .map(|t| block_hessian_mean_oracle(&net, calib, t, 16, 1e-3).unwrap())
        .collect();
    for o in &oracle {
        assert!((o - oracle[0]).abs() <= 1e-9 * oracle[0].abs(), "{oracle:?}");
    }
    let cfg = PerturbationConfig { num_samples: 8192, ..Default::default() };
    let scores = score_all_blocks(&net, calib, &cfg).unwrap();
    for s in &scores.entries {
        assert!(
            (s.score - oracle[0]).abs() <= 3.0 * s.score_stderr,
            "block {}: {} +- {} vs {}",
            s.block,
            s.score,
            s.score_stderr,
            oracle[0]
        );
    }
}
