//! Acceptance suite: one PASS/FAIL line per criterion, each within its time
//! limit. Exits non-zero when any criterion fails.

mod common;

use std::time::{Duration, Instant};

use common::*;
use packptq::pipeline::{run_ablation, AblationConfig, AblationReport};

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Duration,
    run: fn() -> Check,
}

fn all(checks: &[Check]) -> Check {
    let mut parts = Vec::new();
    for c in checks {
        parts.push(c.clone()?);
    }
    Ok(parts.join("; "))
}

fn estimator() -> Check {
    all(&[
        check_estimator_quadratics(&[4, 8, 16, 32, 64], 20_000),
        check_estimator_network("resmlp-8x32", 20_000),
        check_estimator_network("resmlp-4x16", 20_000),
    ])
}

fn gradients() -> Check {
    check_gradients(50, 2024)
}

fn packing() -> Check {
    all(&[check_packing_hand_cases(), check_packing_property(1000, 3)])
}

fn allocator() -> Check {
    check_allocator(1000, 4)
}

fn quantizer() -> Check {
    check_quantizer(10_000, 5)
}

fn descent() -> Check {
    check_descent("resmlp-8x32", &[0, 1, 2, 3, 4])
}

fn median_of(report: &AblationReport, cell: &str) -> Result<f64, String> {
    let row = report.row(cell).ok_or_else(|| format!("no row {cell}"))?;
    if let Some(e) = row.errors.iter().flatten().next() {
        return Err(format!("{cell}: {e}"));
    }
    row.median.ok_or_else(|| format!("{cell}: no successful seed"))
}

fn ablation() -> Check {
    let cfg = fixture_config("resmlp-8x32", &[]);
    let grid = AblationConfig::default();
    let report = run_ablation(&cfg, &grid, None).map_err(|e| e.to_string())?;
    let minmax = median_of(&report, "minmax")?;
    let none = median_of(&report, "none/uniform")?;
    let random = median_of(&report, "random/uniform")?;
    let hada = median_of(&report, "hada/uniform")?;
    let mp = median_of(&report, "hada/mp")?;
    let summary = format!(
        "medians minmax {minmax:.4}, none {none:.4}, random {random:.4}, hada {hada:.4}, hada+mp {mp:.4}"
    );
    let bits = |cell: &str| report.row(cell).map(|r| r.avg_bits.clone()).unwrap_or_default();
    if bits("hada/mp").iter().zip(bits("hada/uniform")).any(|(a, b)| a.zip(b).is_none_or(|(a, b)| a > b)) {
        return Err(format!("hada+mp exceeds the uniform memory budget; {summary}"));
    }
    if !(minmax <= none && none <= hada) {
        return Err(format!("minmax <= block-wise <= hada violated; {summary}"));
    }
    if !(hada >= none && mp >= hada) {
        return Err(format!("hada >= none and hada+mp >= hada violated; {summary}"));
    }
    Ok(summary)
}

fn degenerate() -> Check {
    all(&[
        check_bypass("resmlp-8x32"),
        check_bypass("resmlp-4x16"),
        check_singleton_equivalence("resmlp-8x32", 3),
    ])
}

fn determinism() -> Check {
    check_determinism("resmlp-8x32", 7)
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "score estimator matches Hessian oracle", limit: Duration::from_secs(120), run: estimator },
        Criterion { id: 2, name: "reverse-mode gradients match finite differences", limit: Duration::from_secs(60), run: gradients },
        Criterion { id: 3, name: "HAda packing cases and properties", limit: Duration::from_secs(10), run: packing },
        Criterion { id: 4, name: "allocator equals exhaustive enumeration", limit: Duration::from_secs(30), run: allocator },
        Criterion { id: 5, name: "quantizer properties", limit: Duration::from_secs(10), run: quantizer },
        Criterion { id: 6, name: "reconstruction descends on every pack", limit: Duration::from_secs(300), run: descent },
        Criterion { id: 7, name: "ablation ordering at W3/A3", limit: Duration::from_secs(1200), run: ablation },
        Criterion { id: 8, name: "bypass and singleton-pack equivalences", limit: Duration::from_secs(120), run: degenerate },
        Criterion { id: 9, name: "end-to-end determinism", limit: Duration::from_secs(600), run: determinism },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if elapsed > c.limit => Err(format!("{msg}; took {elapsed:.1?}, limit {:?}", c.limit)),
            other => other,
        };
        match outcome {
            Ok(msg) => println!("PASS [{}] {}: {msg} ({elapsed:.1?})", c.id, c.name),
            Err(msg) => {
                failed += 1;
                println!("FAIL [{}] {}: {msg} ({elapsed:.1?})", c.id, c.name);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
