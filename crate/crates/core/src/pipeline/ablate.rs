//! Grid of packing strategies crossed with uniform or mixed precision, run
//! over shared seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{execute, pretty, write, AblationConfig, RunConfig, RunReport, Stage, StrategyName, Versions};
use crate::error::{Error, Result};

pub const MINMAX_CELL: &str = "minmax";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Uniform,
    Mp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub id: String,
    pub strategy: StrategyName,
    /// Pack size of `fixed-<size>`.
    pub size: Option<usize>,
    pub precision: Precision,
    pub reconstruct: bool,
}

/// Parses `"<strategy>/<precision>"` or the MinMax baseline `"minmax"`.
pub fn parse_cell(text: &str) -> Result<AblationCell> {
    if text == MINMAX_CELL {
        return Ok(AblationCell {
            id: text.to_string(),
            strategy: StrategyName::None,
            size: None,
            precision: Precision::Uniform,
            reconstruct: false,
        });
    }
    let bad = || Error::Config(format!("ablation cell {text:?} is not <none|random|hada|fixed-N>/<uniform|mp>"));
    let (s, p) = text.split_once('/').ok_or_else(bad)?;
    let (strategy, size) = match s {
        "none" => (StrategyName::None, None),
        "random" => (StrategyName::Random, None),
        "hada" => (StrategyName::Hada, None),
        _ => {
            let size: usize = s.strip_prefix("fixed-").and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            if size == 0 {
                return Err(bad());
            }
            (StrategyName::Fixed, Some(size))
        }
    };
    let precision = match p {
        "uniform" => Precision::Uniform,
        "mp" => Precision::Mp,
        _ => return Err(bad()),
    };
    Ok(AblationCell {
        id: text.to_string(),
        strategy,
        size,
        precision,
        reconstruct: true,
    })
}

impl AblationCell {
    /// The base config specialised to this cell and `seed`.
    pub fn config(&self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut cfg = base.clone();
        cfg.set_seed(seed);
        cfg.packing.strategy = self.strategy;
        cfg.packing.size = self.size;
        cfg.mixed_precision = self.precision == Precision::Mp;
        cfg.reconstruct = self.reconstruct;
        cfg.ablation = None;
        cfg
    }

    fn dir_name(&self) -> String {
        self.id.replace('/', "-")
    }
}

/// One row per cell, with per-seed accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub packing: StrategyName,
    pub random: bool,
    pub hada: bool,
    pub mp: bool,
    pub reconstruct: bool,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<Option<f64>>,
    pub pack_counts: Vec<Option<usize>>,
    pub avg_bits: Vec<Option<f64>>,
    /// Error message of every failed seed.
    pub errors: Vec<Option<String>>,
    pub median: Option<f64>,
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub versions: Versions,
    pub config: Value,
    pub full_precision_accuracy: Option<f64>,
    pub rows: Vec<AblationRow>,
    pub wall_time_ms: u64,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Runs every cell of `grid` (plus the MinMax baseline when requested) for
/// every seed. Cell failures are recorded in their row; the others go on.
/// With `out`, each run's report is written under
/// `cells/<cell>/seed-<seed>/report.json`.
pub fn run_ablation(base: &RunConfig, grid: &AblationConfig, out: Option<&Path>) -> Result<AblationReport> {
    let start = Instant::now();
    let mut cells = Vec::new();
    if grid.minmax_baseline {
        cells.push(parse_cell(MINMAX_CELL)?);
    }
    for c in &grid.cells {
        let cell = parse_cell(c)?;
        if !cells.contains(&cell) {
            cells.push(cell);
        }
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| grid.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Vec<Result<RunReport>> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let cfg = cells[c].config(base, seed);
            let report = execute(&cfg, Stage::Report, None)?.report.expect("report stage ran");
            if let Some(dir) = out {
                let path = dir
                    .join("cells")
                    .join(cells[c].dir_name())
                    .join(format!("seed-{seed}"))
                    .join("report.json");
                write(&path, &pretty(&report)?)?;
            }
            Ok(report)
        })
        .collect();

    let mut by_cell: BTreeMap<usize, Vec<(u64, &Result<RunReport>)>> = BTreeMap::new();
    for (&(c, seed), r) in jobs.iter().zip(&results) {
        by_cell.entry(c).or_default().push((seed, r));
    }
    let mut full_precision_accuracy = None;
    let rows = by_cell
        .into_iter()
        .map(|(c, runs)| {
            let cell = &cells[c];
            let ok = |f: &dyn Fn(&RunReport) -> f64| -> Vec<Option<f64>> {
                runs.iter().map(|(_, r)| r.as_ref().ok().map(f)).collect()
            };
            let accuracies = ok(&|r| r.quantized_accuracy.accuracy);
            for (_, r) in &runs {
                if let Ok(r) = r {
                    full_precision_accuracy.get_or_insert(r.fp_accuracy.accuracy);
                }
            }
            let good: Vec<f64> = accuracies.iter().flatten().copied().collect();
            AblationRow {
                cell: cell.id.clone(),
                packing: cell.strategy,
                random: cell.strategy == StrategyName::Random,
                hada: cell.strategy == StrategyName::Hada,
                mp: cell.precision == Precision::Mp,
                reconstruct: cell.reconstruct,
                seeds: runs.iter().map(|(s, _)| *s).collect(),
                pack_counts: runs
                    .iter()
                    .map(|(_, r)| r.as_ref().ok().map(|r| r.plan.packs.len()))
                    .collect(),
                avg_bits: ok(&|r| r.avg_bits),
                errors: runs
                    .iter()
                    .map(|(_, r)| r.as_ref().err().map(|e| e.to_string()))
                    .collect(),
                median: median(&good),
                mean: (!good.is_empty()).then(|| good.iter().sum::<f64>() / good.len() as f64),
                accuracies,
            }
        })
        .collect();
    let mut config = base.to_value();
    if let Value::Object(map) = &mut config {
        map.remove("out");
        map.insert("ablation".into(), serde_json::to_value(grid)?);
    }
    Ok(AblationReport {
        versions: Versions::default(),
        config,
        full_precision_accuracy,
        rows,
        wall_time_ms: start.elapsed().as_millis() as u64,
    })
}

fn cell_value(v: Option<f64>) -> String {
    v.map_or_else(|| "error".to_string(), |x| format!("{x:.6}"))
}

impl AblationReport {
    pub fn row(&self, cell: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell == cell)
    }

    /// One row per cell with a checkmark column per technique.
    pub fn table_csv(&self) -> String {
        let seeds = self.rows.first().map_or(&[][..], |r| &r.seeds[..]);
        let mut s = String::from("cell,packing,random,hada,mp,reconstruct");
        for seed in seeds {
            let _ = write!(s, ",seed_{seed}");
        }
        s.push_str(",median,mean\n");
        for r in &self.rows {
            let mark = |b: bool| if b { "x" } else { "" };
            let packing = serde_json::to_value(r.packing).ok();
            let _ = write!(
                s,
                "{},{},{},{},{},{}",
                r.cell,
                packing.as_ref().and_then(Value::as_str).unwrap_or(""),
                mark(r.random),
                mark(r.hada),
                mark(r.mp),
                mark(r.reconstruct)
            );
            for a in &r.accuracies {
                let _ = write!(s, ",{}", cell_value(*a));
            }
            let _ = writeln!(s, ",{},{}", cell_value(r.median), cell_value(r.mean));
        }
        s
    }

    /// Long format for plotting accuracy against strategy.
    pub fn plot_csv(&self) -> String {
        let mut s = String::from("cell,seed,accuracy,avg_bits,packs\n");
        for r in &self.rows {
            for (i, seed) in r.seeds.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{seed},{},{},{}",
                    r.cell,
                    cell_value(r.accuracies[i]),
                    cell_value(r.avg_bits[i]),
                    r.pack_counts[i].map_or_else(|| "error".to_string(), |n| n.to_string())
                );
            }
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write(&dir.join("ablation.json"), &pretty(self)?)?;
        write(&dir.join("ablation.csv"), &self.table_csv())?;
        write(&dir.join("ablation-plot.csv"), &self.plot_csv())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_parsing() {
        let c = parse_cell("fixed-3/mp").unwrap();
        assert_eq!((c.strategy, c.size, c.precision), (StrategyName::Fixed, Some(3), Precision::Mp));
        assert!(!parse_cell("minmax").unwrap().reconstruct);
        for bad in ["hada", "hada/fp", "fixed-0/mp", "fixed-x/uniform", "greedy/mp"] {
            assert!(parse_cell(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
