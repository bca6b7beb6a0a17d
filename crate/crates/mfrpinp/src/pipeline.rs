//! The experiment steps behind each subcommand.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mfrpinp_core::learner::{
    baseline_predictions, initial_model, run_loop_from, LearnerError, PredictionRecord, RunObserver, RunOutput,
    Scenario,
};
use mfrpinp_core::np::MfrPinpModel;
use mfrpinp_core::physics::RobotState;
use mfrpinp_core::sim::{builtin_profile, simulate, Dataset};
use mfrpinp_core::ukf::run_fusion;

use crate::artifacts::{self, Manifest, PredictionRow, PredictionWriter};
use crate::config::RunConfig;
use crate::dataset::{self, file_hash};
use crate::error::{Error, Result};

/// Every run starts at the origin at rest, as the simulator does.
pub const INITIAL_STATE: RobotState = RobotState {
    x: 0.0,
    y: 0.0,
    theta: 0.0,
    vx: 0.0,
    vy: 0.0,
    omega: 0.0,
};

pub fn simulate_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let profile = builtin_profile(&cfg.scenario, cfg.seed)?;
    Ok(simulate(&profile, &cfg.sim_spec(), cfg.seed)?)
}

/// UKF-fused states, one per frame.
pub fn fuse_dataset(cfg: &RunConfig, data: &Dataset) -> Result<Vec<RobotState>> {
    Ok(run_fusion(&data.sensors, &cfg.ukf_config(), &cfg.params(), INITIAL_STATE)?)
}

/// Loads a dataset and its fused labels, checking they line up.
pub fn load_inputs(data: &Path, labels: &Path) -> Result<(Dataset, Vec<RobotState>)> {
    let d = dataset::load_dataset(data)?;
    let (times, states) = dataset::load_fused(labels)?;
    if states.len() != d.len() {
        return Err(Error::validation(format!(
            "{} has {} rows but {} has {}",
            labels.display(),
            states.len(),
            data.display(),
            d.len()
        )));
    }
    if let Some(i) = (0..d.len()).find(|&i| (times[i] - d.sensors[i].t).abs() > 1e-9) {
        return Err(Error::validation(format!(
            "timestamps of {} and {} differ at row {}",
            data.display(),
            labels.display(),
            i + 1
        )));
    }
    Ok((d, states))
}

/// Records wall-clock latency and writes checkpoints into the run directory.
struct FileObserver {
    start: Instant,
    dir: PathBuf,
    latency: Vec<(usize, f64)>,
    failure: Option<Error>,
}

impl RunObserver for FileObserver {
    fn now_ms(&mut self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1e3
    }

    fn on_prediction(&mut self, rec: &PredictionRecord, latency_ms: f64) {
        self.latency.push((rec.iter, latency_ms));
    }

    fn on_checkpoint(&mut self, iter: usize, model: &MfrPinpModel) {
        if self.failure.is_none() {
            if let Err(e) = artifacts::save_model(&artifacts::checkpoint_path(&self.dir, iter), model) {
                self.failure = Some(e);
            }
        }
    }

    fn on_error(&mut self, iter: usize, err: &LearnerError) {
        eprintln!("iteration {iter} skipped: {err}");
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Train on a separate thread against published snapshots.
    pub concurrent: bool,
    /// Start from this checkpoint instead of a fresh model.
    pub init: Option<PathBuf>,
}

/// Summary of a finished run; the full logs are in the run directory.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub predictions: usize,
    pub training_phases: usize,
    pub errors: usize,
    pub low_inserted: u64,
    pub high_inserted: u64,
}

fn write_predictions(dir: &Path, rows: &[PredictionRow]) -> Result<()> {
    artifacts::save_csv(dir, artifacts::PREDICTIONS, rows, |w, rows| {
        let mut p = PredictionWriter::new(w)?;
        for r in rows {
            p.write(r)?;
        }
        p.finish()
    })
}

fn manifest(
    kind: &str,
    cfg: &RunConfig,
    data: &Path,
    labels: &Path,
    frames: usize,
    opts: &RunOptions,
) -> Result<Manifest> {
    Ok(Manifest {
        kind: kind.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.to_text(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        scenario: cfg.scenario.clone(),
        frames,
        dataset: data.display().to_string(),
        dataset_hash: file_hash(data)?,
        labels: labels.display().to_string(),
        labels_hash: file_hash(labels)?,
        concurrent: opts.concurrent,
        initial_checkpoint: opts.init.as_ref().map(|p| p.display().to_string()),
    })
}

/// The online loop over a recorded dataset, writing every artifact to `out`.
pub fn run(
    cfg: &RunConfig,
    data_path: &Path,
    labels_path: &Path,
    out: &Path,
    opts: &RunOptions,
) -> Result<RunSummary> {
    let (data, labels) = load_inputs(data_path, labels_path)?;
    let lc = cfg.loop_config();
    let model = match &opts.init {
        Some(p) => artifacts::load_model(p, cfg.np)?,
        None => initial_model(&lc)?,
    };
    std::fs::create_dir_all(out)?;
    let scenario = Scenario {
        frames: &data.sensors,
        labels: &labels,
        initial: INITIAL_STATE,
    };
    let mut obs = FileObserver {
        start: Instant::now(),
        dir: out.to_path_buf(),
        latency: Vec::with_capacity(data.len()),
        failure: None,
    };
    let result: RunOutput = if opts.concurrent {
        crate::concurrent::run_concurrent(&scenario, &lc, model, &mut obs)?
    } else {
        run_loop_from(&scenario, &lc, model, &mut obs)?
    };
    if let Some(e) = obs.failure {
        return Err(e);
    }
    let rows: Vec<PredictionRow> = result.predictions.iter().map(PredictionRow::from).collect();
    write_predictions(out, &rows)?;
    artifacts::save_csv(out, artifacts::LATENCY, obs.latency.as_slice(), artifacts::write_latency)?;
    artifacts::save_csv(out, artifacts::LOSSES, result.losses.as_slice(), artifacts::write_losses)?;
    artifacts::save_csv(out, artifacts::QUANTILES, result.quantiles.as_slice(), artifacts::write_quantiles)?;
    artifacts::save_model(&out.join(artifacts::MODEL), &result.model)?;
    artifacts::write_manifest(out, &manifest("run", cfg, data_path, labels_path, data.len(), opts)?)?;
    Ok(RunSummary {
        predictions: rows.len(),
        training_phases: result.losses.len(),
        errors: result.errors.len(),
        low_inserted: result.low_inserted,
        high_inserted: result.high_inserted,
    })
}

/// Dead-reckoning predictions with the fallback standard deviation, in the
/// same layout as a run.
pub fn baseline(cfg: &RunConfig, data_path: &Path, labels_path: &Path, out: &Path) -> Result<usize> {
    let (data, labels) = load_inputs(data_path, labels_path)?;
    let scenario = Scenario {
        frames: &data.sensors,
        labels: &labels,
        initial: INITIAL_STATE,
    };
    let preds = baseline_predictions(&scenario, &cfg.params(), &cfg.np.fallback_std)?;
    std::fs::create_dir_all(out)?;
    let rows: Vec<PredictionRow> = preds.iter().map(PredictionRow::from).collect();
    write_predictions(out, &rows)?;
    let opts = RunOptions::default();
    artifacts::write_manifest(out, &manifest("baseline", cfg, data_path, labels_path, data.len(), &opts)?)?;
    Ok(rows.len())
}

