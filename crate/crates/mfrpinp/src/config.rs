//! Run configuration: a flat `section.key = value` text format.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Lists are comma separated. Unknown or repeated keys are errors, missing
//! keys keep their defaults.

use std::fmt::Write as _;
use std::path::Path;

use mfrpinp_core::conformal::ConformalConfig;
use mfrpinp_core::learner::{LoopConfig, TrainConfig};
use mfrpinp_core::np::NpConfig;
use mfrpinp_core::physics::KinematicParams;
use mfrpinp_core::sim::{SimSpec, BUILTIN_NAMES};
use mfrpinp_core::ukf::{UkfConfig, UtParams, DEFAULT_WHEEL_MISMATCH};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A rejected config; `line` is 0 when the problem is not tied to one line.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            0 => write!(f, "config: {}", self.message),
            n => write!(f, "config line {n}: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<ConfigError> for Error {
    fn from(e: ConfigError) -> Self {
        Error::Validation(e.to_string())
    }
}

/// Filter settings; measurement variances follow the sensor noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UkfSettings {
    pub ut: UtParams,
    pub q: [f64; 6],
    pub p0: [f64; 6],
    pub wheel_mismatch: f64,
    pub use_wheel: bool,
    pub use_imu: bool,
    pub use_hifi: bool,
}

impl Default for UkfSettings {
    fn default() -> Self {
        let base = UkfConfig::default();
        Self {
            ut: base.ut,
            q: base.q,
            p0: base.p0,
            wheel_mismatch: DEFAULT_WHEEL_MISMATCH,
            use_wheel: base.use_wheel,
            use_imu: base.use_imu,
            use_hifi: base.use_hifi,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: String,
    pub frames: usize,
    pub output: String,
    pub sim: SimSpec,
    pub ukf: UkfSettings,
    pub np: NpConfig,
    pub train: TrainConfig,
    pub conformal: ConformalConfig,
    pub bench_iterations: usize,
    pub bench_budget_ms: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenario: "figure-eight".into(),
            frames: 5000,
            output: "runs/default".into(),
            sim: SimSpec::default(),
            ukf: UkfSettings::default(),
            np: NpConfig::default(),
            train: TrainConfig::default(),
            conformal: ConformalConfig::default(),
            bench_iterations: 2000,
            bench_budget_ms: 20.0,
        }
    }
}

mod value {
    use mfrpinp_core::sim::DisturbanceKind;

    pub type Parsed<T> = Result<T, String>;

    pub fn f64(s: &str) -> Parsed<f64> {
        let v: f64 = s.parse().map_err(|_| format!("expected a number, got {s:?}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("expected a finite number, got {s:?}"))
        }
    }

    pub fn usize(s: &str) -> Parsed<usize> {
        s.parse().map_err(|_| format!("expected a non-negative integer, got {s:?}"))
    }

    pub fn u64(s: &str) -> Parsed<u64> {
        s.parse().map_err(|_| format!("expected a non-negative integer, got {s:?}"))
    }

    pub fn bool(s: &str) -> Parsed<bool> {
        match s {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("expected true or false, got {s:?}")),
        }
    }

    pub fn text(s: &str) -> Parsed<String> {
        if s.is_empty() {
            Err("expected a value".into())
        } else {
            Ok(s.to_string())
        }
    }

    pub fn list6(s: &str) -> Parsed<[f64; 6]> {
        let items: Vec<&str> = s.split(',').map(str::trim).collect();
        if items.len() != 6 {
            return Err(format!("expected 6 comma-separated numbers, got {}", items.len()));
        }
        let mut out = [0.0; 6];
        for (o, item) in out.iter_mut().zip(items) {
            *o = f64(item)?;
        }
        Ok(out)
    }

    /// A period in iterations, or `off`.
    pub fn period(s: &str) -> Parsed<Option<usize>> {
        if s == "off" {
            Ok(None)
        } else {
            usize(s).map(Some)
        }
    }

    pub fn disturbance(s: &str) -> Parsed<DisturbanceKind> {
        match s {
            "none" => Ok(DisturbanceKind::None),
            "ou" => Ok(DisturbanceKind::OrnsteinUhlenbeck),
            _ => Err(format!("expected none or ou, got {s:?}")),
        }
    }
}

mod show {
    use mfrpinp_core::sim::DisturbanceKind;

    pub fn f64(v: &f64) -> String {
        format!("{v:?}")
    }

    pub fn usize(v: &usize) -> String {
        v.to_string()
    }

    pub fn u64(v: &u64) -> String {
        v.to_string()
    }

    pub fn bool(v: &bool) -> String {
        v.to_string()
    }

    pub fn text(v: &str) -> String {
        v.to_string()
    }

    pub fn list6(v: &[f64; 6]) -> String {
        v.iter().map(f64).collect::<Vec<_>>().join(", ")
    }

    pub fn period(v: &Option<usize>) -> String {
        v.map_or_else(|| "off".into(), |p| p.to_string())
    }

    pub fn disturbance(v: &DisturbanceKind) -> String {
        match v {
            DisturbanceKind::None => "none".into(),
            DisturbanceKind::OrnsteinUhlenbeck => "ou".into(),
        }
    }
}

macro_rules! fields {
    ($($key:literal => $kind:ident : $($path:ident).+;)*) => {
        /// Every accepted key, in canonical order.
        pub const KEYS: &[&str] = &[$($key),*];

        fn set_field(c: &mut RunConfig, key: &str, v: &str) -> Result<(), String> {
            match key {
                $($key => c.$($path).+ = value::$kind(v)?,)*
                _ => return Err(format!("unknown key {key:?}")),
            }
            Ok(())
        }

        fn get_fields(c: &RunConfig) -> Vec<(&'static str, String)> {
            vec![$(($key, show::$kind(&c.$($path).+))),*]
        }
    };
}

fields! {
    "run.seed" => u64: seed;
    "run.scenario" => text: scenario;
    "run.frames" => usize: frames;
    "run.output" => text: output;
    "robot.mass" => f64: sim.params.mass;
    "robot.wheel_radius" => f64: sim.params.wheel_radius;
    "robot.track" => f64: sim.params.track;
    "robot.inertia" => f64: sim.params.inertia;
    "robot.c_t" => f64: sim.params.c_t;
    "robot.c_alpha" => f64: sim.params.c_alpha;
    "noise.encoder" => f64: sim.noise.encoder;
    "noise.imu_yaw_rate" => f64: sim.noise.imu_yaw_rate;
    "noise.imu_bias_walk" => f64: sim.noise.imu_bias_walk;
    "noise.hifi_position" => f64: sim.noise.hifi_position;
    "noise.hifi_heading" => f64: sim.noise.hifi_heading;
    "noise.hifi_velocity" => f64: sim.noise.hifi_velocity;
    "noise.hifi_yaw_rate" => f64: sim.noise.hifi_yaw_rate;
    "disturbance.kind" => disturbance: sim.disturbance.kind;
    "disturbance.rate" => list6: sim.disturbance.rate;
    "disturbance.sigma" => list6: sim.disturbance.sigma;
    "rates.low_hz" => f64: sim.rates.low_hz;
    "rates.high_hz" => f64: sim.rates.high_hz;
    "rates.jitter" => f64: sim.rates.jitter;
    "sim.actuator_limit" => f64: sim.actuator_limit;
    "ukf.alpha" => f64: ukf.ut.alpha;
    "ukf.beta" => f64: ukf.ut.beta;
    "ukf.kappa" => f64: ukf.ut.kappa;
    "ukf.q" => list6: ukf.q;
    "ukf.p0" => list6: ukf.p0;
    "ukf.wheel_mismatch" => f64: ukf.wheel_mismatch;
    "ukf.use_wheel" => bool: ukf.use_wheel;
    "ukf.use_imu" => bool: ukf.use_imu;
    "ukf.use_hifi" => bool: ukf.use_hifi;
    "model.hidden" => usize: np.hidden;
    "model.latent" => usize: np.latent;
    "model.key_dim" => usize: np.key_dim;
    "model.context_window" => usize: np.context_window;
    "model.min_context" => usize: np.min_context;
    "model.deterministic" => bool: np.deterministic;
    "model.fallback_std" => list6: np.fallback_std;
    "train.windows" => usize: train.windows;
    "train.window_len" => usize: train.window_len;
    "train.low_capacity" => usize: train.low_capacity;
    "train.high_capacity" => usize: train.high_capacity;
    "train.period" => period: train.train_period;
    "train.sync_period" => usize: train.sync_period;
    "train.high_every" => usize: train.high_every;
    "train.lr" => f64: train.lr;
    "train.weight_decay" => f64: train.weight_decay;
    "train.warmup" => usize: train.warmup;
    "train.label_delay" => usize: train.label_delay;
    "train.checkpoint_every" => period: train.checkpoint_every;
    "conformal.alpha" => f64: conformal.alpha;
    "conformal.window" => usize: conformal.window;
    "conformal.refit_period" => usize: conformal.refit_period;
    "conformal.min_scores" => usize: conformal.min_scores;
    "bench.iterations" => usize: bench_iterations;
    "bench.budget_ms" => f64: bench_budget_ms;
}

impl RunConfig {
    /// Parses config text over the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = RunConfig::default();
        let mut seen: Vec<(&str, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| ConfigError { line, message };
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, v) = body
                .split_once('=')
                .ok_or_else(|| err("expected `section.key = value`".into()))?;
            let (key, v) = (key.trim(), v.trim());
            if let Some((_, first)) = seen.iter().find(|(k, _)| *k == key) {
                return Err(err(format!("{key} already set on line {first}")));
            }
            set_field(&mut c, key, v).map_err(|m| err(format!("{key}: {m}")))?;
            let canonical = KEYS.iter().find(|k| **k == key).expect("known key");
            seen.push((canonical, line));
        }
        c.validate().map_err(|message| ConfigError { line: 0, message })?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
    }

    /// Applies one `section.key = value` assignment and revalidates.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let err = |message| ConfigError { line: 0, message };
        let mut next = self.clone();
        set_field(&mut next, key, v).map_err(|m| err(format!("{key}: {m}")))?;
        next.validate().map_err(err)?;
        *self = next;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        if !BUILTIN_NAMES.contains(&self.scenario.as_str()) {
            return Err(format!(
                "run.scenario: unknown profile {:?} (expected one of {})",
                self.scenario,
                BUILTIN_NAMES.join(", ")
            ));
        }
        if self.frames == 0 {
            return Err("run.frames must be positive".into());
        }
        if self.bench_iterations == 0 || !(self.bench_budget_ms > 0.0) {
            return Err("bench.iterations and bench.budget_ms must be positive".into());
        }
        self.sim.validate().map_err(|e| e.to_string())?;
        self.loop_config().validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn params(&self) -> KinematicParams {
        self.sim.params
    }

    pub fn sim_spec(&self) -> SimSpec {
        SimSpec {
            frames: self.frames,
            ..self.sim
        }
    }

    pub fn ukf_config(&self) -> UkfConfig {
        let s = &self.ukf;
        UkfConfig {
            ut: s.ut,
            q: s.q,
            p0: s.p0,
            use_wheel: s.use_wheel,
            use_imu: s.use_imu,
            use_hifi: s.use_hifi,
            ..UkfConfig::from_noise(&self.sim.noise, &self.sim.params, s.wheel_mismatch)
        }
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            np: self.np,
            train: TrainConfig {
                seed: self.seed,
                ..self.train
            },
            conformal: self.conformal,
            params: self.sim.params,
            ukf: self.ukf_config(),
        }
    }

    /// Every key with its value, one per line, in canonical order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, v) in get_fields(self) {
            let s = key.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            let _ = writeln!(out, "{key} = {v}");
        }
        out
    }

    /// SHA-256 of [`RunConfig::to_text`], hex encoded.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_text().as_bytes()))
    }
}

