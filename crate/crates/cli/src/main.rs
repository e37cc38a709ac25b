//! `packptq`: command-line front end of the quantization pipeline.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 numerical failure.
//! `PACKPTQ_THREADS` caps the worker pool.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use packptq::pipeline::{self, parse_override, RunConfig};
use packptq::Error;

#[derive(Parser)]
#[command(name = "packptq", version, about = "Hessian-guided pack-wise post-training quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run config (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Sets a config value by dotted path, e.g. `reconstruction.base_lr=0.01`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate per-block Hessian scores.
    Score(Common),
    /// Score and partition blocks into packs.
    Pack(Common),
    /// Score, pack and allocate per-pack weight bits.
    Allocate(Common),
    /// Allocate and MinMax-quantize, without reconstruction.
    Quantize(Common),
    /// Quantize and reconstruct every pack.
    Reconstruct(Common),
    /// Test accuracy of the model and optionally of a quantized model.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Quantized model document to evaluate.
        #[arg(long, value_name = "PATH")]
        quantized: Option<PathBuf>,
    },
    /// Run every stage and write the run report.
    Pipeline(Common),
    /// Run the ablation grid over shared seeds.
    Ablate(Common),
    /// Write the configured synthetic dataset.
    GenData(Common),
    /// Build and train the model of the `generate` section.
    GenModel(Common),
}

fn load(common: &Common) -> Result<RunConfig, Error> {
    let mut overrides = common
        .overrides
        .iter()
        .map(|o| parse_override(o))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.into()));
    }
    if let Some(out) = &common.out {
        overrides.push(("out".into(), out.to_string_lossy().into_owned().into()));
    }
    RunConfig::load(&common.config, &overrides)
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("PACKPTQ_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Config(format!("PACKPTQ_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(command: Command) -> Result<(), Error> {
    configure_threads()?;
    match command {
        Command::Score(c) => {
            let cfg = load(&c)?;
            let scores = pipeline::cmd_score(&cfg)?;
            for s in &scores.entries {
                println!("block {:>3}  score {:.6e}  stderr {:.2e}", s.block, s.score, s.score_stderr);
            }
            done(&cfg)
        }
        Command::Pack(c) => {
            let cfg = load(&c)?;
            let plan = pipeline::cmd_pack(&cfg)?;
            println!("{} packs: {:?}", plan.packs.len(), plan.packs);
            done(&cfg)
        }
        Command::Allocate(c) => {
            let cfg = load(&c)?;
            let a = pipeline::cmd_allocate(&cfg)?;
            println!("bits {:?}  cost {} / budget {}  avg {:.3}", a.bits(), a.cost, a.budget, a.avg_bits);
            done(&cfg)
        }
        Command::Quantize(c) => {
            let cfg = load(&c)?;
            let q = pipeline::cmd_quantize(&cfg)?;
            println!("block weight bits {:?}", q.weight_bits());
            done(&cfg)
        }
        Command::Reconstruct(c) => {
            let cfg = load(&c)?;
            let (_, traces) = pipeline::cmd_reconstruct(&cfg)?;
            for t in &traces {
                println!(
                    "pack {:?}  loss {:.6e} -> {:.6e}",
                    t.pack, t.initial_loss, t.final_loss
                );
            }
            done(&cfg)
        }
        Command::Eval { common, quantized } => {
            let cfg = load(&common)?;
            let r = pipeline::cmd_eval(&cfg, quantized.as_deref())?;
            println!("full precision {:.4}", r.full_precision.accuracy);
            if let Some(q) = &r.quantized {
                println!("quantized      {:.4}", q.accuracy);
            }
            done(&cfg)
        }
        Command::Pipeline(c) => {
            let cfg = load(&c)?;
            let r = pipeline::cmd_pipeline(&cfg)?;
            println!(
                "packs {}  bits {:?}  avg {:.3}  accuracy {:.4} (full precision {:.4})",
                r.plan.packs.len(),
                r.allocation.bits(),
                r.avg_bits,
                r.quantized_accuracy.accuracy,
                r.fp_accuracy.accuracy
            );
            done(&cfg)
        }
        Command::Ablate(c) => {
            let cfg = load(&c)?;
            let r = pipeline::cmd_ablate(&cfg)?;
            print!("{}", r.table_csv());
            done(&cfg)
        }
        Command::GenData(c) => {
            let cfg = load(&c)?;
            let d = pipeline::cmd_gen_data(&cfg)?;
            println!("{} calibration + {} test samples", d.calibration.len(), d.test.len());
            done(&cfg)
        }
        Command::GenModel(c) => {
            let cfg = load(&c)?;
            let (_, r) = pipeline::cmd_gen_model(&cfg)?;
            println!(
                "{}: {} epochs, train accuracy {:.4}, test accuracy {:.4}",
                r.arch, r.train.epochs, r.train.train_accuracy, r.test_accuracy
            );
            done(&cfg)
        }
    }
}

fn done(cfg: &RunConfig) -> Result<(), Error> {
    println!("artifacts in {}", cfg.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
