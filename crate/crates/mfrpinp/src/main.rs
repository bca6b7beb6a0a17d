use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mfrpinp::calibrate::{run_study, CoverageStudy};
use mfrpinp::pipeline::{self, RunOptions};
use mfrpinp::report::{self, MetricsReport};
use mfrpinp::{bench, dataset, Error, Result, RunConfig};

/// Exit status of a check (`bench`, `calibrate-check`) that ran but failed.
const CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "mfrpinp", version, about = "Multi-fidelity residual neural-process state estimation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file of `section.key = value` lines.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set run.seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the configured scenario and write the dataset CSV.
    Simulate {
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run the UKF over a dataset and write the fused states.
    Fuse {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// The online train / infer / calibrate loop over a dataset.
    Run {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Run directory; defaults to `run.output`.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Train on a background thread (not reproducible).
        #[arg(long)]
        concurrent: bool,
        /// Start from a saved model instead of a fresh one.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Dead-reckoning predictions in the same layout as `run`.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Metrics of a run directory against fused labels.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Fraction of predictions, counted from the end, to score.
        #[arg(long, default_value_t = 1.0)]
        tail: f64,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Side-by-side metrics of two JSON reports.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Coverage of the conformal calibration on synthetic residuals.
    CalibrateCheck {
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 500)]
        calibration: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Latency histogram of single inference steps.
    Bench,
    /// Print the effective config in canonical form.
    Config,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &c.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::validation(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| Error::validation(format!("--set {o}: {}", e.message)))?;
    }
    Ok(cfg)
}

fn out_dir(out: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from(&cfg.output))
}

fn ensure_parent(p: &Path) -> Result<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => Ok(std::fs::create_dir_all(d)?),
        _ => Ok(()),
    }
}

fn execute(cli: Cli) -> Result<u8> {
    let cfg = load_config(&cli.common)?;
    match cli.cmd {
        Cmd::Simulate { out } => {
            let d = pipeline::simulate_dataset(&cfg)?;
            ensure_parent(&out)?;
            dataset::save_dataset(&out, &d)?;
            println!("{} frames of {} (seed {}) -> {}", d.len(), cfg.scenario, cfg.seed, out.display());
        }
        Cmd::Fuse { data, out } => {
            let d = dataset::load_dataset(&data)?;
            let fused = pipeline::fuse_dataset(&cfg, &d)?;
            let times: Vec<f64> = d.sensors.iter().map(|f| f.t).collect();
            ensure_parent(&out)?;
            dataset::save_fused(&out, &times, &fused)?;
            println!("{} fused states -> {}", fused.len(), out.display());
        }
        Cmd::Run {
            data,
            labels,
            out,
            concurrent,
            init,
        } => {
            let dir = out_dir(out, &cfg);
            let s = pipeline::run(&cfg, &data, &labels, &dir, &RunOptions { concurrent, init })?;
            println!(
                "{} predictions, {} training phases, {} skipped iterations -> {}",
                s.predictions,
                s.training_phases,
                s.errors,
                dir.display()
            );
        }
        Cmd::Baseline { data, labels, out } => {
            let dir = out_dir(out, &cfg);
            let n = pipeline::baseline(&cfg, &data, &labels, &dir)?;
            println!("{n} dead-reckoning predictions -> {}", dir.display());
        }
        Cmd::Evaluate { run, labels, tail, json } => {
            let r = report::evaluate(&run, &labels, tail)?;
            print!("{}", r.to_text());
            if let Some(p) = json {
                ensure_parent(&p)?;
                r.save(&p)?;
            }
        }
        Cmd::Compare { a, b, csv } => {
            let rows = report::compare(&MetricsReport::load(&a)?, &MetricsReport::load(&b)?)?;
            print!("{}", report::comparison_text(&rows));
            if let Some(p) = csv {
                ensure_parent(&p)?;
                std::fs::write(&p, report::comparison_csv(&rows)?)?;
            }
        }
        Cmd::CalibrateCheck {
            alpha,
            trials,
            calibration,
            test,
            seed,
        } => {
            let study = CoverageStudy {
                alpha,
                calibration,
                test,
                trials,
                seed,
                ..CoverageStudy::default()
            };
            let r = run_study(&study)?;
            print!("{}", r.to_text());
            if !r.passed() {
                eprintln!("coverage check failed");
                return Ok(CHECK_FAILED);
            }
        }
        Cmd::Config => print!("{}", cfg.to_text()),
        Cmd::Bench => {
            let r = bench::bench(&cfg)?;
            print!("{}", r.to_text());
            if !r.within_budget() {
                return Ok(CHECK_FAILED);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
