//! Run artifact files.
//!
//! A run directory holds:
//! - `predictions.csv`: `iter, t`, the fused mean `mu_*`, the calibrated
//!   standard deviation `sigma_*`, the raw one `sigma_raw_*`, the quantiles
//!   `q_*` in force and a `fallback` flag;
//! - `latency.csv`: `iter, latency_ms`;
//! - `losses.csv`: `iter, elbo_low, elbo_res, kl_low, kl_res, loss, applied`;
//! - `quantiles.csv`: `iter, n, q_*, saturated`;
//! - `manifest.json`, `model.ckpt` and `checkpoints/iter_NNNNNN.ckpt`.
//!
//! Wall-clock latency lives in its own file so `predictions.csv` is a pure
//! function of config, seed and inputs.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use mfrpinp_core::conformal::QuantileVector;
use mfrpinp_core::learner::{LossRecord, PredictionRecord};
use mfrpinp_core::np::MfrPinpModel;
use serde::{Deserialize, Serialize};

use crate::dataset::{fmt_f64, DataError};
use crate::error::{Error, Result};

pub const PREDICTIONS: &str = "predictions.csv";
pub const LATENCY: &str = "latency.csv";
pub const LOSSES: &str = "losses.csv";
pub const QUANTILES: &str = "quantiles.csv";
pub const MANIFEST: &str = "manifest.json";
pub const MODEL: &str = "model.ckpt";
pub const CHECKPOINTS: &str = "checkpoints";

const DIMS: [&str; 6] = ["x", "y", "th", "vx", "vy", "w"];

fn named(prefix: &str) -> impl Iterator<Item = String> + '_ {
    DIMS.iter().map(move |d| format!("{prefix}_{d}"))
}

pub fn prediction_columns() -> Vec<String> {
    let mut c = vec!["iter".to_string(), "t".to_string()];
    c.extend(named("mu"));
    c.extend(named("sigma"));
    c.extend(named("sigma_raw"));
    c.extend(named("q"));
    c.push("fallback".into());
    c
}

/// One row of `predictions.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionRow {
    pub iter: usize,
    pub t: f64,
    pub mu: [f64; 6],
    pub sigma: [f64; 6],
    pub sigma_raw: [f64; 6],
    pub q: [f64; 6],
    pub fallback: bool,
}

impl From<&PredictionRecord> for PredictionRow {
    fn from(r: &PredictionRecord) -> Self {
        Self {
            iter: r.iter,
            t: r.t,
            mu: r.raw.mean,
            sigma: r.calibrated.std(),
            sigma_raw: r.raw.std(),
            q: r.quantile,
            fallback: r.fallback,
        }
    }
}

/// Streams prediction rows to any writer.
pub struct PredictionWriter<W: Write> {
    w: csv::Writer<W>,
}

impl<W: Write> PredictionWriter<W> {
    pub fn new(out: W) -> Result<Self, DataError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(prediction_columns())?;
        Ok(Self { w })
    }

    pub fn write(&mut self, r: &PredictionRow) -> Result<(), DataError> {
        let mut row = vec![r.iter.to_string(), fmt_f64(r.t)];
        for a in [&r.mu, &r.sigma, &r.sigma_raw, &r.q] {
            row.extend(a.iter().map(|v| fmt_f64(*v)));
        }
        row.push(u8::from(r.fallback).to_string());
        self.w.write_record(&row)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), DataError> {
        self.w.flush().map_err(|e| DataError::Io(e.to_string()))
    }
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn parse_cell<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<T, DataError> {
    let s = rec.get(i).unwrap_or("").trim();
    s.parse().map_err(|_| DataError::Parse {
        line: line_of(rec),
        message: format!("column {name}: cannot parse {s:?}"),
    })
}

fn index(headers: &csv::StringRecord, names: &[String]) -> Result<Vec<usize>, DataError> {
    names
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h.trim() == n)
                .ok_or_else(|| DataError::MissingColumn(n.clone()))
        })
        .collect()
}

pub fn read_predictions<R: Read>(input: R) -> Result<Vec<PredictionRow>, DataError> {
    let mut r = csv::Reader::from_reader(input);
    let names = prediction_columns();
    let idx = index(r.headers()?, &names)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |k: usize| parse_cell::<f64>(&rec, idx[k], &names[k]);
        let arr = |from: usize| -> Result<[f64; 6], DataError> {
            let mut a = [0.0; 6];
            for j in 0..6 {
                a[j] = f(from + j)?;
            }
            Ok(a)
        };
        let fallback: u8 = parse_cell(&rec, idx[26], "fallback")?;
        out.push(PredictionRow {
            iter: parse_cell(&rec, idx[0], "iter")?,
            t: f(1)?,
            mu: arr(2)?,
            sigma: arr(8)?,
            sigma_raw: arr(14)?,
            q: arr(20)?,
            fallback: fallback != 0,
        });
    }
    Ok(out)
}

pub fn write_latency<W: Write>(out: W, rows: &[(usize, f64)]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "latency_ms"])?;
    for (i, ms) in rows {
        w.write_record([i.to_string(), fmt_f64(*ms)])?;
    }
    w.flush().map_err(|e| DataError::Io(e.to_string()))
}

pub fn read_latency<R: Read>(input: R) -> Result<Vec<(usize, f64)>, DataError> {
    let mut r = csv::Reader::from_reader(input);
    let idx = index(r.headers()?, &["iter".into(), "latency_ms".into()])?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok((parse_cell(&rec, idx[0], "iter")?, parse_cell(&rec, idx[1], "latency_ms")?))
        })
        .collect()
}

const LOSS_COLUMNS: [&str; 7] = ["iter", "elbo_low", "elbo_res", "kl_low", "kl_res", "loss", "applied"];

pub fn write_losses<W: Write>(out: W, rows: &[LossRecord]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOSS_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.iter.to_string(),
            fmt_f64(r.elbo_low),
            fmt_f64(r.elbo_res),
            fmt_f64(r.kl_low),
            fmt_f64(r.kl_res),
            fmt_f64(r.loss),
            u8::from(r.applied).to_string(),
        ])?;
    }
    w.flush().map_err(|e| DataError::Io(e.to_string()))
}

pub fn read_losses<R: Read>(input: R) -> Result<Vec<LossRecord>, DataError> {
    let mut r = csv::Reader::from_reader(input);
    let names: Vec<String> = LOSS_COLUMNS.iter().map(|s| s.to_string()).collect();
    let idx = index(r.headers()?, &names)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            let f = |k: usize| parse_cell::<f64>(&rec, idx[k], LOSS_COLUMNS[k]);
            let applied: u8 = parse_cell(&rec, idx[6], "applied")?;
            Ok(LossRecord {
                iter: parse_cell(&rec, idx[0], "iter")?,
                elbo_low: f(1)?,
                elbo_res: f(2)?,
                kl_low: f(3)?,
                kl_res: f(4)?,
                loss: f(5)?,
                applied: applied != 0,
            })
        })
        .collect()
}

pub fn write_quantiles<W: Write>(out: W, rows: &[QuantileVector]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["iter".to_string(), "n".to_string()];
    header.extend(named("q"));
    header.push("saturated".into());
    w.write_record(&header)?;
    for q in rows {
        let mut row = vec![q.fitted_at.to_string(), q.n.to_string()];
        row.extend(q.q.iter().map(|v| fmt_f64(*v)));
        row.push(q.saturated.iter().filter(|s| **s).count().to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| DataError::Io(e.to_string()))
}

/// Everything needed to repeat a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// `run`, `baseline`, ...
    pub kind: String,
    pub version: String,
    /// Canonical config text.
    pub config: String,
    pub config_hash: String,
    pub seed: u64,
    pub scenario: String,
    pub frames: usize,
    pub dataset: String,
    pub dataset_hash: String,
    pub labels: String,
    pub labels_hash: String,
    pub concurrent: bool,
    pub initial_checkpoint: Option<String>,
}

pub fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(m)?;
    std::fs::write(dir.join(MANIFEST), text + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Option<Manifest>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}

pub fn checkpoint_path(dir: &Path, iter: usize) -> PathBuf {
    dir.join(CHECKPOINTS).join(format!("iter_{iter:06}.ckpt"))
}

pub fn save_model(path: &Path, model: &MfrPinpModel) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, model.to_checkpoint().encode())?;
    Ok(())
}

pub fn load_model(path: &Path, cfg: mfrpinp_core::np::NpConfig) -> Result<MfrPinpModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
    let ck = mfrpinp_core::autodiff::checkpoint::Checkpoint::decode(&bytes)
        .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
    MfrPinpModel::from_checkpoint(cfg, &ck).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}

/// Writes `rows` through `write` into `dir/name`.
pub fn save_csv<T: ?Sized>(
    dir: &Path,
    name: &str,
    rows: &T,
    write: impl FnOnce(std::io::BufWriter<std::fs::File>, &T) -> Result<(), DataError>,
) -> Result<()> {
    let path = dir.join(name);
    let f = std::fs::File::create(&path)?;
    write(std::io::BufWriter::new(f), rows).map_err(|e| Error::runtime(format!("{}: {e}", path.display())))
}

/// Reads `dir/name` through `read`.
pub fn load_csv<T>(
    dir: &Path,
    name: &str,
    read: impl FnOnce(std::io::BufReader<std::fs::File>) -> Result<T, DataError>,
) -> Result<T> {
    let path = dir.join(name);
    let f = std::fs::File::open(&path).map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
    read(std::io::BufReader::new(f)).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}
