use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use edgepop_core::checkpoint::Checkpoint;
use edgepop_core::config::{Algorithm, Precision, TrainConfig};
use edgepop_core::sweep::{run_sweep, Axis, SweepSpec};
use edgepop_core::train::{evaluate_dataset, load_datasets, train, MetricsRow, TrainState};
use edgepop_core::verify::{run_suite, Suite};
use edgepop_core::{Element, Error, Result};

#[derive(Parser)]
#[command(name = "edgepop", version, about = "Find subnetworks hidden in randomly weighted networks")]
struct Cli {
    /// Worker threads (sweep grid points, exhaustive search).
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration; writes config.toml, metrics.csv and checkpoint.bin.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of its dataset.
    Eval {
        checkpoint: PathBuf,
        /// Dataset root overriding the one stored in the checkpoint.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Run a grid over one config axis and print mean/std per point.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// k, width, fixed_params, init, algorithm or seed.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Seeds per grid point.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Also train this algorithm per point and report the accuracy gap.
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for sweep.csv; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a check suite: topk, gradients, bruteforce, variance, swap, swap_general.
    Verify {
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.workers.max(1)).build_global();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::Train { config, seed, out } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = Some(o);
            }
            let cfg = cfg.validated()?;
            let dir = cfg
                .out_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.hash()[..12]));
            match cfg.precision {
                Precision::F32 => cmd_train::<f32>(&cfg, &dir),
                Precision::F64 => cmd_train::<f64>(&cfg, &dir),
            }
        }
        Cmd::Eval { checkpoint, data_dir } => {
            let ck = Checkpoint::load(&checkpoint)?;
            match ck.meta.config.precision {
                Precision::F32 => cmd_eval::<f32>(&ck, data_dir),
                Precision::F64 => cmd_eval::<f64>(&ck, data_dir),
            }
        }
        Cmd::Sweep {
            config,
            axis,
            values,
            seeds,
            baseline,
            seed,
            out,
        } => {
            let mut base = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                base.seed = s;
            }
            let base = base.validated()?;
            let baseline = baseline
                .map(|b| b.parse::<Algorithm>().map_err(|e| Error::Config(e.to_string())))
                .transpose()?;
            let spec = SweepSpec {
                axis: axis.parse::<Axis>()?,
                values,
                seeds,
                baseline,
                workers: cli.workers.max(1),
            };
            let (tr, te) = load_datasets(&base)?;
            let result = run_sweep(&base, &spec, &tr, &te)?;
            for (v, why) in &result.skipped {
                eprintln!("skipped {}={v}: {why}", spec.axis.name());
            }
            let csv = result.to_csv();
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir)?;
                    fs::write(dir.join("sweep.csv"), &csv)?;
                    eprintln!("wrote {}", dir.join("sweep.csv").display());
                }
                None => print!("{csv}"),
            }
            Ok(0)
        }
        Cmd::Verify { suite, seed } => {
            let suite: Suite = suite.parse()?;
            let report = run_suite(suite, seed)?;
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            let ok = report.passed();
            println!("{} {}", suite.name(), if ok { "passed" } else { "FAILED" });
            Ok(if ok { 0 } else { 1 })
        }
    }
}

fn cmd_train<T: Element>(cfg: &TrainConfig, dir: &Path) -> Result<u8> {
    let (tr, te) = load_datasets(cfg)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let metrics_path = dir.join("metrics.csv");
    let layers = TrainState::<T>::init(cfg, tr.sample_shape())?.model.num_masked();
    writeln!(File::create(&metrics_path)?, "{}", MetricsRow::csv_header(layers))?;
    let state = train::<T>(cfg, &tr, &te, |s| {
        let row = s.metrics.last().expect("epoch finished");
        let mut f = OpenOptions::new().append(true).open(&metrics_path)?;
        writeln!(f, "{}", row.to_csv())?;
        eprintln!(
            "epoch {:>3}  lr {:.4}  train loss {:.4} acc {:.4}  test loss {:.4} acc {:.4}",
            row.epoch, row.lr, row.train_loss, row.train_acc, row.test_loss, row.test_acc
        );
        Ok(())
    })?;
    Checkpoint::capture(cfg, &state)?.save(&dir.join("checkpoint.bin"))?;
    if let Some(row) = state.metrics.last() {
        println!("test accuracy {:.4}", row.test_acc);
    }
    println!("wrote {}", dir.display());
    Ok(0)
}

fn cmd_eval<T: Element>(ck: &Checkpoint, data_dir: Option<PathBuf>) -> Result<u8> {
    let mut cfg = ck.meta.config.clone();
    if data_dir.is_some() {
        cfg.dataset.data_dir = data_dir;
    }
    let state = ck.restore::<T>()?;
    let (_, te) = load_datasets(&cfg)?;
    let eval_rng = edgepop_core::rng::RngStream::new(cfg.seed).fork("eval");
    let (loss, acc) = evaluate_dataset(&state.model, &te, Some(&eval_rng))?;
    let edges = state.model.subnet_size()?;
    let total = state.model.total_weights();
    println!("accuracy {acc:.4}");
    println!("loss {loss:.6}");
    println!("edges {edges} of {total}");
    println!("k {}", cfg.k);
    println!("epoch {}", ck.meta.epoch);
    Ok(0)
}
