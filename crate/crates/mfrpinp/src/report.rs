//! Metrics over run logs and side-by-side comparison of two reports.

use std::fmt::Write as _;
use std::path::Path;

use mfrpinp_core::conformal::coverage_eval;
use mfrpinp_core::metrics::{align_heading, nll, rmse};
use mfrpinp_core::np::GaussianPrediction;
use serde::{Deserialize, Serialize};

use crate::artifacts::{self, PredictionRow};
use crate::dataset::{self, file_hash};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

/// Nearest-rank percentile of sorted data, `p` in (0, 1].
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        Some(Self {
            count: s.len(),
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            p50_ms: percentile(&s, 0.50),
            p95_ms: percentile(&s, 0.95),
            p99_ms: percentile(&s, 0.99),
            max_ms: s[s.len() - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `run` or `baseline`, from the manifest when present.
    pub kind: Option<String>,
    /// Prediction rows in the evaluated span.
    pub rows: usize,
    /// Fraction of prediction rows evaluated, counted from the end.
    pub tail: f64,
    pub fallback_rows: usize,
    pub rmse: f64,
    /// NLL with the calibrated standard deviation.
    pub nll: f64,
    /// NLL with the model's own standard deviation.
    pub nll_raw: f64,
    pub coverage: [f64; 6],
    pub coverage_raw: [f64; 6],
    pub latency: Option<LatencyStats>,
    /// Mean joint loss over the first and last tenth of training phases.
    pub loss_first_decile: Option<f64>,
    pub loss_last_decile: Option<f64>,
    pub config_hash: Option<String>,
    /// SHA-256 of the label file.
    pub dataset_hash: String,
}

fn decile_means(losses: &[f64]) -> Option<(f64, f64)> {
    let k = losses.len() / 10;
    if k == 0 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..k]), mean(&losses[losses.len() - k..])))
}

fn gaussians(rows: &[&PredictionRow], raw: bool) -> Result<Vec<GaussianPrediction>> {
    rows.iter()
        .map(|r| {
            let sd = if raw { r.sigma_raw } else { r.sigma };
            GaussianPrediction::new(r.mu, sd.map(|s| s * s))
                .map_err(|e| Error::validation(format!("prediction at iter {}: {e}", r.iter)))
        })
        .collect()
}

/// Metrics of the run in `dir` against the fused labels in `labels`, over
/// the last `tail` fraction of its predictions.
pub fn evaluate(dir: &Path, labels: &Path, tail: f64) -> Result<MetricsReport> {
    if !(tail > 0.0 && tail <= 1.0) {
        return Err(Error::validation(format!("tail must lie in (0, 1], got {tail}")));
    }
    let preds = artifacts::load_csv(dir, artifacts::PREDICTIONS, artifacts::read_predictions)?;
    if preds.is_empty() {
        return Err(Error::validation(format!("{}: no predictions", dir.display())));
    }
    let (times, states) = dataset::load_fused(labels)?;
    let keep = ((preds.len() as f64 * tail).round() as usize).clamp(1, preds.len());
    let span: Vec<&PredictionRow> = preds[preds.len() - keep..].iter().collect();

    let mut y = Vec::with_capacity(span.len());
    for r in &span {
        let label = states.get(r.iter).ok_or_else(|| {
            Error::validation(format!("no label for iter {} in {}", r.iter, labels.display()))
        })?;
        if (times[r.iter] - r.t).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "label time {} does not match prediction time {} at iter {}",
                times[r.iter], r.t, r.iter
            )));
        }
        y.push(align_heading(&label.to_array(), &r.mu));
    }
    let mu: Vec<[f64; 6]> = span.iter().map(|r| r.mu).collect();
    let cal = gaussians(&span, false)?;
    let raw = gaussians(&span, true)?;
    let var = |g: &[GaussianPrediction]| g.iter().map(|p| p.var).collect::<Vec<_>>();

    let latency = match artifacts::load_csv(dir, artifacts::LATENCY, artifacts::read_latency) {
        Ok(rows) => LatencyStats::from_samples(&rows.iter().map(|r| r.1).collect::<Vec<_>>()),
        Err(_) if !dir.join(artifacts::LATENCY).exists() => None,
        Err(e) => return Err(e),
    };
    let losses = if dir.join(artifacts::LOSSES).exists() {
        let l = artifacts::load_csv(dir, artifacts::LOSSES, artifacts::read_losses)?;
        decile_means(&l.iter().map(|r| r.loss).collect::<Vec<_>>())
    } else {
        None
    };
    let manifest = artifacts::read_manifest(dir)?;

    Ok(MetricsReport {
        kind: manifest.as_ref().map(|m| m.kind.clone()),
        rows: span.len(),
        tail,
        fallback_rows: span.iter().filter(|r| r.fallback).count(),
        rmse: rmse(&y, &mu)?,
        nll: nll(&y, &mu, &var(&cal))?,
        nll_raw: nll(&y, &mu, &var(&raw))?,
        coverage: coverage_eval(&y, &cal)?,
        coverage_raw: coverage_eval(&y, &raw)?,
        latency,
        loss_first_decile: losses.map(|l| l.0),
        loss_last_decile: losses.map(|l| l.1),
        config_hash: manifest.map(|m| m.config_hash),
        dataset_hash: file_hash(labels)?,
    })
}

fn mean6(a: &[f64; 6]) -> f64 {
    a.iter().sum::<f64>() / 6.0
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "kind            {}", self.kind.as_deref().unwrap_or("-"));
        let _ = writeln!(s, "rows            {} (last {:.0}%, {} fallback)", self.rows, self.tail * 100.0, self.fallback_rows);
        let _ = writeln!(s, "rmse            {:.6}", self.rmse);
        let _ = writeln!(s, "nll calibrated  {:.6}", self.nll);
        let _ = writeln!(s, "nll raw         {:.6}", self.nll_raw);
        let cov = |c: &[f64; 6]| c.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "coverage        {}", cov(&self.coverage));
        let _ = writeln!(s, "coverage raw    {}", cov(&self.coverage_raw));
        if let Some(l) = &self.latency {
            let _ = writeln!(
                s,
                "latency ms      p50 {:.3}  p95 {:.3}  p99 {:.3}  max {:.3}",
                l.p50_ms, l.p95_ms, l.p99_ms, l.max_ms
            );
        }
        if let (Some(a), Some(b)) = (self.loss_first_decile, self.loss_last_decile) {
            let _ = writeln!(s, "loss            first 10% {a:.4}  last 10% {b:.4}");
        }
        if let Some(h) = &self.config_hash {
            let _ = writeln!(s, "config          {h}");
        }
        let _ = writeln!(s, "labels          {}", self.dataset_hash);
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
    }
}

/// One metric of two reports; `delta = a - b`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Delta {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
}

/// Side-by-side metrics of two reports on the same labels.
pub fn compare(a: &MetricsReport, b: &MetricsReport) -> Result<Vec<Delta>> {
    if a.dataset_hash != b.dataset_hash {
        return Err(Error::validation(format!(
            "reports come from different label files ({} vs {})",
            a.dataset_hash, b.dataset_hash
        )));
    }
    let mut rows = vec![
        ("rmse", a.rmse, b.rmse),
        ("nll", a.nll, b.nll),
        ("nll_raw", a.nll_raw, b.nll_raw),
        ("coverage_mean", mean6(&a.coverage), mean6(&b.coverage)),
        ("coverage_raw_mean", mean6(&a.coverage_raw), mean6(&b.coverage_raw)),
        ("rows", a.rows as f64, b.rows as f64),
    ];
    if let (Some(la), Some(lb)) = (&a.latency, &b.latency) {
        rows.push(("latency_p99_ms", la.p99_ms, lb.p99_ms));
    }
    Ok(rows
        .into_iter()
        .map(|(m, x, y)| Delta {
            metric: m.into(),
            a: x,
            b: y,
            delta: x - y,
        })
        .collect())
}

pub fn comparison_csv(rows: &[Delta]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::runtime(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::runtime(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::runtime(e.to_string()))
}

pub fn comparison_text(rows: &[Delta]) -> String {
    let mut s = format!("{:<20}{:>14}{:>14}{:>14}\n", "metric", "a", "b", "a - b");
    for r in rows {
        let _ = writeln!(s, "{:<20}{:>14.6}{:>14.6}{:>14.6}", r.metric, r.a, r.b, r.delta);
    }
    s
}
