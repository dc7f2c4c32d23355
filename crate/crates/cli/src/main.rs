use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use hybridscan::config::{Preset, RunConfig};
use hybridscan::data::Dataset;
use hybridscan::gradcheck::full_suite;
use hybridscan::model::SegModel;
use hybridscan::orders::{build_order, locality_stats, OrderKind, WindowVariant};
use hybridscan::scan::{scan_parallel, scan_sequential};
use hybridscan::train::{ablate, ablation_csv, evaluate, train, write_json, TrainOutputs};
use hybridscan::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "hybridscan", version, about = "Volumetric segmentation with slice/local selective scans and frequency gating")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON overlay merged onto the preset; unknown keys are rejected.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "HYBRIDSCAN_THREADS", default_value_t = 1, value_name = "N")]
    threads: usize,
    /// Output directory (overrides the config file).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Base configuration preset.
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    Full,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum KindArg {
    SliceF,
    SliceR,
    LocalF,
    LocalR,
    LocalS,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum VariantArg {
    WithinSlice,
    AcrossSlice,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (vseg files + manifest.json).
    Gen,
    /// Train a model; writes model.hsck, curves.csv, history.json.
    Train {
        /// Dataset directory from `gen`; generated in memory when omitted.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes report.json.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Finite-difference check of every op and block; nonzero exit on failure.
    Gradcheck {
        /// Number of seeds for the op suite.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Scan throughput, sequential against parallel.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = vec![256usize, 4096, 65536])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        lanes: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Emit a scan order permutation and locality statistics as JSON.
    Orders {
        /// Volume extent as D,H,W.
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        /// Window size.
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Window ordering for local orders (ignored when --kind is given).
        #[arg(long, value_enum, default_value_t = VariantArg::WithinSlice)]
        variant: VariantArg,
        /// Explicit order kind.
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
    },
    /// Train and test the four module combinations; writes ablation.json/csv.
    Ablate {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Numerical(_) => 3,
        Error::Io { .. } | Error::Data(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn resolve_config(g: &Global) -> Result<RunConfig> {
    let preset = match g.preset {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Full => Preset::Full,
    };
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p, preset)?,
        None => RunConfig::preset(preset),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    cfg.finish()
}

fn load_data(cfg: &RunConfig, dir: Option<&Path>) -> Result<Dataset> {
    match dir {
        Some(d) => Ok(Dataset::load(d)?.0),
        None => Dataset::synthetic(&cfg.data, cfg.seed),
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn run(cli: Cli) -> Result<u8> {
    let g = &cli.global;
    hybridscan::set_threads(g.threads)?;
    match &cli.cmd {
        Command::Orders { dims, k, variant, kind } => {
            let &[d, h, w] = dims.as_slice() else {
                return Err(Error::Usage(format!("--dims needs three extents D,H,W, got {dims:?}")));
            };
            let dims = (d, h, w);
            let kind = match kind {
                Some(KindArg::SliceF) => OrderKind::SliceF,
                Some(KindArg::SliceR) => OrderKind::SliceR,
                Some(KindArg::LocalF) => OrderKind::LocalF,
                Some(KindArg::LocalR) => OrderKind::LocalR,
                Some(KindArg::LocalS) => OrderKind::LocalS,
                None => match variant {
                    VariantArg::WithinSlice => OrderKind::LocalF,
                    VariantArg::AcrossSlice => OrderKind::LocalS,
                },
            };
            let order = build_order(kind, dims, *k)?;
            let variant = match kind {
                OrderKind::LocalS => Some(WindowVariant::AcrossSlice),
                OrderKind::LocalF | OrderKind::LocalR => Some(WindowVariant::WithinSlice),
                _ => None,
            };
            print_json(&json!({
                "dims": [dims.0, dims.1, dims.2],
                "kind": kind,
                "k": order.window(),
                "variant": variant,
                "forward": order.forward(),
                "inverse": order.inverse(),
                "locality": locality_stats(dims, *k)?,
            }));
            Ok(0)
        }
        Command::Bench { lengths, lanes, reps } => {
            let mut rows = Vec::new();
            for &len in lengths {
                let n = len * lanes;
                let a: Vec<f64> = (0..n).map(|i| 0.5 + 0.49 * ((i * 7919) % 1000) as f64 / 1000.0).collect();
                let b: Vec<f64> = (0..n).map(|i| ((i * 104_729) % 2000) as f64 / 1000.0 - 1.0).collect();
                let time = |f: &dyn Fn() -> Vec<f64>| {
                    let t = Instant::now();
                    for _ in 0..*reps {
                        std::hint::black_box(f());
                    }
                    t.elapsed().as_secs_f64() / *reps as f64
                };
                let ts = time(&|| scan_sequential(&a, &b, len));
                let tp = time(&|| scan_parallel(&a, &b, len));
                rows.push(json!({
                    "length": len,
                    "lanes": lanes,
                    "sequential_s": ts,
                    "parallel_s": tp,
                    "sequential_elems_per_s": n as f64 / ts,
                    "parallel_elems_per_s": n as f64 / tp,
                }));
            }
            let report = json!({"threads": g.threads, "dtype": "real64", "results": rows});
            if let Some(o) = &g.out {
                fs::create_dir_all(o).map_err(|e| Error::io(o, e))?;
                write_json(&o.join("bench.json"), &report)?;
            }
            print_json(&report);
            Ok(0)
        }
        Command::Gradcheck { seeds } => {
            let cfg = resolve_config(g)?;
            let seed_list: Vec<u64> = (0..*seeds).map(|s| cfg.seed + s).collect();
            let results = full_suite(&seed_list)?;
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                println!(
                    "{:<4} {:<24} seed {:<3} max rel err {:.3e} (tol {:.0e})",
                    if r.passed { "ok" } else { "FAIL" },
                    r.name,
                    r.seed,
                    r.max_rel_err,
                    r.tolerance
                );
            }
            if let Some(o) = &g.out {
                fs::create_dir_all(o).map_err(|e| Error::io(o, e))?;
                cfg.echo(o)?;
                write_json(&o.join("gradcheck.json"), &results)?;
            }
            println!("{} checks, {failed} failed", results.len());
            Ok(if failed == 0 { 0 } else { 3 })
        }
        Command::Gen => {
            let cfg = resolve_config(g)?;
            let ds = Dataset::synthetic(&cfg.data, cfg.seed)?;
            ds.save(&cfg.out_dir, &cfg.data, cfg.seed)?;
            cfg.echo(&cfg.out_dir)?;
            println!(
                "wrote {} cases to {} (train {}, val {}, test {})",
                ds.cases.len(),
                cfg.out_dir.display(),
                ds.split.train.len(),
                ds.split.val.len(),
                ds.split.test.len()
            );
            Ok(0)
        }
        Command::Train { data } => {
            let cfg = resolve_config(g)?;
            cfg.echo(&cfg.out_dir)?;
            let ds = load_data(&cfg, data.as_deref())?;
            let mut model = SegModel::build(&cfg.model, cfg.seed)?;
            println!("model parameters: {}", model.num_parameters());
            let out = TrainOutputs { dir: &cfg.out_dir };
            train(&mut model, &ds, &cfg.train, Some(out), |r| {
                let val = match (r.val_dice, r.val_hd95) {
                    (Some(d), Some(h)) => format!("  val Dice {d:.4}  HD95 {h:.3}"),
                    _ => String::new(),
                };
                println!("epoch {:>4}  lr {:.3e}  CE {:.5}{val}", r.epoch, r.lr, r.train_ce);
            })?;
            println!("wrote {}", cfg.out_dir.join(TrainOutputs::CHECKPOINT).display());
            Ok(0)
        }
        Command::Eval { checkpoint, data, split } => {
            let cfg = resolve_config(g)?;
            let ds = load_data(&cfg, data.as_deref())?;
            let mut model = SegModel::build(&cfg.model, cfg.seed)?;
            model.params.load(checkpoint)?;
            let idx = match split {
                SplitArg::Train => &ds.split.train,
                SplitArg::Val => &ds.split.val,
                SplitArg::Test => &ds.split.test,
            };
            let report = evaluate(&model, &ds.subset(idx))?;
            cfg.echo(&cfg.out_dir)?;
            let path = cfg.out_dir.join("report.json");
            write_json(&path, &report)?;
            println!(
                "{} cases: Dice {:.4}  HD95 {:.3}  -> {}",
                report.cases.len(),
                report.mean.dice,
                report.mean.hd95,
                path.display()
            );
            Ok(0)
        }
        Command::Ablate { data } => {
            let cfg = resolve_config(g)?;
            cfg.echo(&cfg.out_dir)?;
            let ds = load_data(&cfg, data.as_deref())?;
            let rows = ablate(
                &cfg.model,
                &ds,
                &cfg.train,
                |name, r| {
                    if let (Some(d), Some(h)) = (r.val_dice, r.val_hd95) {
                        println!("[{name}] epoch {:>4}  CE {:.5}  val Dice {d:.4}  HD95 {h:.3}", r.epoch, r.train_ce);
                    }
                },
                |row, _| println!("[{}] test Dice {:.4}  HD95 {:.3}", row.name, row.dice, row.hd95),
            )?;
            write_json(&cfg.out_dir.join("ablation.json"), &rows)?;
            let csv = cfg.out_dir.join("ablation.csv");
            fs::write(&csv, ablation_csv(&rows)).map_err(|e| Error::io(&csv, e))?;
            print!("{}", ablation_csv(&rows));
            Ok(0)
        }
    }
}
