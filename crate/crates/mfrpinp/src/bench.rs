//! Latency of a single inference step at the configured model size.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use mfrpinp_core::learner::{initial_model, stream_rng, stream_transitions, Scenario};
use mfrpinp_core::np::{infer_step, InferenceQuery};
use mfrpinp_core::sim::{builtin_profile, simulate};
use rand::Rng;

use crate::config::RunConfig;
use crate::error::Result;
use crate::pipeline::{fuse_dataset, INITIAL_STATE};
use crate::report::LatencyStats;

const WARMUP_CALLS: usize = 50;

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub stats: LatencyStats,
    pub budget_ms: f64,
    /// Upper bucket edges in ms and counts; the last bucket is open.
    pub histogram: Vec<(f64, usize)>,
}

impl BenchReport {
    pub fn within_budget(&self) -> bool {
        self.stats.p99_ms < self.budget_ms
    }

    pub fn to_text(&self) -> String {
        let s = &self.stats;
        let mut out = format!(
            "infer_step over {} calls: mean {:.3} ms, p50 {:.3}, p95 {:.3}, p99 {:.3}, max {:.3}\n",
            s.count, s.mean_ms, s.p50_ms, s.p95_ms, s.p99_ms, s.max_ms
        );
        let widest = self.histogram.iter().map(|b| b.1).max().unwrap_or(1).max(1);
        let mut lo = 0.0;
        for (hi, n) in &self.histogram {
            let bar = "#".repeat((n * 40).div_ceil(widest));
            let label = if hi.is_finite() {
                format!("{lo:>7.3}-{hi:<7.3}")
            } else {
                format!("{lo:>7.3}+       ")
            };
            let _ = writeln!(out, "{label} {n:>7} {bar}");
            lo = *hi;
        }
        let _ = writeln!(
            out,
            "p99 {:.3} ms {} the {:.1} ms budget",
            s.p99_ms,
            if self.within_budget() { "within" } else { "exceeds" },
            self.budget_ms
        );
        out
    }
}

fn histogram(samples: &[f64], max: f64) -> Vec<(f64, usize)> {
    const BUCKETS: usize = 12;
    let width = (max / BUCKETS as f64).max(1e-6);
    let mut edges: Vec<(f64, usize)> = (1..BUCKETS).map(|i| (i as f64 * width, 0)).collect();
    edges.push((f64::INFINITY, 0));
    for &v in samples {
        let slot = edges.iter().position(|(hi, _)| v < *hi).unwrap_or(BUCKETS - 1);
        edges[slot].1 += 1;
    }
    edges
}

/// Times `cfg.bench_iterations` inference steps on a full context window
/// taken from a short simulated run.
pub fn bench(cfg: &RunConfig) -> Result<BenchReport> {
    let lc = cfg.loop_config();
    let frames = cfg.np.context_window + 64;
    let sim_cfg = RunConfig {
        frames,
        ..cfg.clone()
    };
    let profile = builtin_profile(&cfg.scenario, cfg.seed)?;
    let data = simulate(&profile, &sim_cfg.sim_spec(), cfg.seed)?;
    let labels = fuse_dataset(&sim_cfg, &data)?;
    let scenario = Scenario {
        frames: &data.sensors,
        labels: &labels,
        initial: INITIAL_STATE,
    };
    let (lows, _) = stream_transitions(&scenario, &lc, 0)?;
    let model = initial_model(&lc)?;
    let mut rng = stream_rng(cfg.seed, 2);
    let w = cfg.np.context_window;

    let mut samples = Vec::with_capacity(cfg.bench_iterations);
    for k in 0..WARMUP_CALLS + cfg.bench_iterations {
        let start = rng.random_range(0..lows.len() - w);
        let q = lows[start + w];
        let query = InferenceQuery {
            cmd: q.cmd,
            dk: q.dk,
            state_low: q.state,
            g2_next: labels[start + w],
        };
        let t0 = Instant::now();
        let out = infer_step(&model, &lows[start..start + w], &query, &lc.params, &[1.0; 6], Some(&mut rng))?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        black_box(out);
        if k >= WARMUP_CALLS {
            samples.push(ms);
        }
    }
    let stats = LatencyStats::from_samples(&samples).expect("at least one iteration");
    Ok(BenchReport {
        histogram: histogram(&samples, stats.p99_ms * 1.5),
        stats,
        budget_ms: cfg.bench_budget_ms,
    })
}
