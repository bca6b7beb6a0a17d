//! Ground-truth simulation and multi-rate sensor synthesis.
//!
//! Truth is integrated with [`g2_step`] from rest at the origin at `t = 0`.
//! Each low-fidelity tick advances time by a jittered `dk`. Within a tick the
//! integration is split at profile segment boundaries, so truth is the exact
//! response to the piecewise-constant schedule; the encoders report the
//! time-averaged wheel rate over the tick (plus noise). High-fidelity odometry
//! is attached to the first low tick at or after each scheduled
//! high-fidelity time.

use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent f64 math shadows it when std is linked
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::physics::{
    g1_step, g2_step, wrap_angle, DynState, KinematicParams, PhysicsError, RobotState, WheelCmd,
    DEFAULT_ACTUATOR_LIMIT,
};

mod profiles;

pub use profiles::{builtin_profile, builtin_profiles, pivot_duration, BUILTIN_NAMES};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("unknown profile `{0}`")]
    UnknownProfile(String),
    #[error("profile `{0}` has no segments")]
    EmptyProfile(String),
    #[error("profile `{name}` segment {index} has a non-positive or non-finite duration")]
    BadSegment { name: String, index: usize },
    #[error("rates must be positive with the high-fidelity rate below the low-fidelity rate")]
    InvalidRates,
    #[error("jitter fraction must lie in [0, 0.5) (got {0})")]
    InvalidJitter(f64),
    #[error("noise standard deviation `{0}` must be finite and non-negative")]
    InvalidNoise(&'static str),
    #[error("disturbance rate and sigma must be finite and non-negative")]
    InvalidDisturbance,
    #[error("sensor stream is empty")]
    EmptyStream,
    #[error("frame {index}: dk must be positive")]
    BadFrame { index: usize },
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

/// One piecewise-constant command segment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub duration: f64,
    pub cmd: WheelCmd,
}

impl Segment {
    pub fn new(duration: f64, right: f64, left: f64) -> Self {
        Self {
            duration,
            cmd: WheelCmd::new(right, left),
        }
    }
}

/// A named command schedule. Playback repeats the schedule cyclically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryProfile {
    pub name: String,
    pub schedule: Vec<Segment>,
}

impl TrajectoryProfile {
    pub fn new(name: impl Into<String>, schedule: Vec<Segment>) -> Result<Self, SimError> {
        let name = name.into();
        if schedule.is_empty() {
            return Err(SimError::EmptyProfile(name));
        }
        if let Some(index) = schedule
            .iter()
            .position(|s| !(s.duration > 0.0 && s.duration.is_finite()))
        {
            return Err(SimError::BadSegment { name, index });
        }
        Ok(Self { name, schedule })
    }

    pub fn total_duration(&self) -> f64 {
        self.schedule.iter().map(|s| s.duration).sum()
    }

    /// Command in force at time `t >= 0`.
    pub fn command_at(&self, t: f64) -> WheelCmd {
        let (i, _) = self.locate(t);
        self.schedule[i].cmd
    }

    /// Segment index containing `t` and the time left in it. Boundaries closer
    /// than [`BOUNDARY_EPS`] count as already reached.
    fn locate(&self, t: f64) -> (usize, f64) {
        let total = self.total_duration();
        let mut tau = t.max(0.0) % total;
        for (i, s) in self.schedule.iter().enumerate() {
            if tau + BOUNDARY_EPS < s.duration {
                return (i, s.duration - tau);
            }
            tau -= s.duration;
        }
        (0, self.schedule[0].duration)
    }

    /// Splits `[t, t + dk]` at segment boundaries into `(duration, command)`
    /// pieces.
    pub fn pieces(&self, t: f64, dk: f64) -> Vec<(f64, WheelCmd)> {
        let (mut i, mut left_in_seg) = self.locate(t);
        let mut remaining = dk;
        let mut out = Vec::new();
        loop {
            let cmd = self.schedule[i].cmd;
            if left_in_seg + BOUNDARY_EPS >= remaining {
                out.push((remaining, cmd));
                return out;
            }
            out.push((left_in_seg, cmd));
            remaining -= left_in_seg;
            i = (i + 1) % self.schedule.len();
            left_in_seg = self.schedule[i].duration;
        }
    }
}

/// Segment boundaries this close to a tick are snapped onto it.
pub const BOUNDARY_EPS: f64 = 1e-9;

/// Standard deviations of the synthesized sensor noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorNoiseSpec {
    /// rad/s, per wheel
    pub encoder: f64,
    /// rad/s
    pub imu_yaw_rate: f64,
    /// rad/s per sqrt(s)
    pub imu_bias_walk: f64,
    /// m
    pub hifi_position: f64,
    /// rad
    pub hifi_heading: f64,
    /// m/s
    pub hifi_velocity: f64,
    /// rad/s
    pub hifi_yaw_rate: f64,
}

impl Default for SensorNoiseSpec {
    fn default() -> Self {
        Self {
            encoder: 0.05,
            imu_yaw_rate: 0.01,
            imu_bias_walk: 0.001,
            hifi_position: 0.01,
            hifi_heading: 0.005,
            hifi_velocity: 0.01,
            hifi_yaw_rate: 0.01,
        }
    }
}

impl SensorNoiseSpec {
    pub fn zero() -> Self {
        Self {
            encoder: 0.0,
            imu_yaw_rate: 0.0,
            imu_bias_walk: 0.0,
            hifi_position: 0.0,
            hifi_heading: 0.0,
            hifi_velocity: 0.0,
            hifi_yaw_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fields = [
            ("encoder", self.encoder),
            ("imu_yaw_rate", self.imu_yaw_rate),
            ("imu_bias_walk", self.imu_bias_walk),
            ("hifi_position", self.hifi_position),
            ("hifi_heading", self.hifi_heading),
            ("hifi_velocity", self.hifi_velocity),
            ("hifi_yaw_rate", self.hifi_yaw_rate),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::InvalidNoise(name));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DisturbanceKind {
    None,
    #[default]
    OrnsteinUhlenbeck,
}

/// Disturbance added to the `g2` state derivatives, in [`DynState`] order
/// `(x, y, theta, u, v, omega)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisturbanceSpec {
    pub kind: DisturbanceKind,
    /// mean-reversion rate, 1/s
    pub rate: [f64; 6],
    pub sigma: [f64; 6],
}

impl Default for DisturbanceSpec {
    fn default() -> Self {
        Self {
            kind: DisturbanceKind::OrnsteinUhlenbeck,
            rate: [0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
            sigma: [0.05, 0.05, 0.02, 0.0, 0.0, 0.0],
        }
    }
}

impl DisturbanceSpec {
    pub fn none() -> Self {
        Self {
            kind: DisturbanceKind::None,
            rate: [0.0; 6],
            sigma: [0.0; 6],
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ok = |v: &f64| *v >= 0.0 && v.is_finite();
        if self.rate.iter().all(ok) && self.sigma.iter().all(ok) {
            Ok(())
        } else {
            Err(SimError::InvalidDisturbance)
        }
    }
}

/// Exact discretization of `dx = -rate x dt + sigma dW` over `dt`.
pub fn ou_step<R: Rng + ?Sized>(x: f64, rate: f64, sigma: f64, dt: f64, rng: &mut R) -> f64 {
    let xi: f64 = rng.sample(StandardNormal);
    if rate == 0.0 {
        return x + sigma * dt.sqrt() * xi;
    }
    let decay = (-rate * dt).exp();
    let sd = sigma * ((1.0 - decay * decay) / (2.0 * rate)).sqrt();
    x * decay + sd * xi
}

/// Nominal tick rates and the uniform jitter fraction applied to every
/// interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorRates {
    pub low_hz: f64,
    pub high_hz: f64,
    pub jitter: f64,
}

impl Default for SensorRates {
    fn default() -> Self {
        Self {
            low_hz: 50.0,
            high_hz: 10.0,
            jitter: 0.2,
        }
    }
}

impl SensorRates {
    pub fn validate(&self) -> Result<(), SimError> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.low_hz) || !pos(self.high_hz) || self.high_hz >= self.low_hz {
            return Err(SimError::InvalidRates);
        }
        if !(self.jitter >= 0.0 && self.jitter < 0.5) {
            return Err(SimError::InvalidJitter(self.jitter));
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, hz: f64, rng: &mut R) -> f64 {
        let u: f64 = if self.jitter > 0.0 {
            rng.random_range(-self.jitter..self.jitter)
        } else {
            0.0
        };
        (1.0 + u) / hz
    }
}

/// Everything except the profile and the seed that a simulation needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimSpec {
    pub params: KinematicParams,
    pub noise: SensorNoiseSpec,
    pub disturbance: DisturbanceSpec,
    pub rates: SensorRates,
    pub actuator_limit: f64,
    /// Number of low-fidelity ticks to generate.
    pub frames: usize,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            params: KinematicParams::default(),
            noise: SensorNoiseSpec::default(),
            disturbance: DisturbanceSpec::default(),
            rates: SensorRates::default(),
            actuator_limit: DEFAULT_ACTUATOR_LIMIT,
            frames: 5000,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        self.params.validate()?;
        self.noise.validate()?;
        self.disturbance.validate()?;
        self.rates.validate()?;
        if !(self.actuator_limit > 0.0) {
            return Err(SimError::InvalidRates);
        }
        Ok(())
    }
}

/// What the robot observes at one low-fidelity tick.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorFrame {
    pub t: f64,
    pub dk: f64,
    pub encoder: WheelCmd,
    pub imu_yaw_rate: f64,
    /// Noisy pose and inertial rates, present on high-fidelity ticks only.
    pub hifi: Option<RobotState>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthFrame {
    pub t: f64,
    pub state: RobotState,
    /// Body-frame `(u_b, v_b)`.
    pub body: (f64, f64),
    /// Disturbance applied over the interval ending at `t`.
    pub disturbance: [f64; 6],
}

/// Aligned truth and sensor streams.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub truth: Vec<GroundTruthFrame>,
    pub sensors: Vec<SensorFrame>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn hifi_count(&self) -> usize {
        self.sensors.iter().filter(|f| f.hifi.is_some()).count()
    }
}

fn gauss<R: Rng + ?Sized>(rng: &mut R, sd: f64) -> f64 {
    let xi: f64 = rng.sample(StandardNormal);
    sd * xi
}

/// Generates truth and sensor streams, reproducible from `seed`.
pub fn simulate(
    profile: &TrajectoryProfile,
    spec: &SimSpec,
    seed: u64,
) -> Result<Dataset, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = &spec.params;
    let n = &spec.noise;
    let ou = spec.disturbance.kind == DisturbanceKind::OrnsteinUhlenbeck;

    let mut state = DynState::default();
    let mut dist = [0.0; 6];
    let mut bias = 0.0;
    let mut t = 0.0;
    let mut next_hifi = spec.rates.draw(spec.rates.high_hz, &mut rng);
    let mut out = Dataset {
        truth: Vec::with_capacity(spec.frames),
        sensors: Vec::with_capacity(spec.frames),
    };

    for _ in 0..spec.frames {
        let dk = spec.rates.draw(spec.rates.low_hz, &mut rng);
        let pieces = profile.pieces(t, dk);
        let mut avg = WheelCmd::default();
        for &(h, cmd) in &pieces {
            let cmd = cmd.clamped(spec.actuator_limit);
            state = g2_step(&state, cmd, p, h)?;
            avg.right += cmd.right * h / dk;
            avg.left += cmd.left * h / dk;
        }
        if pieces.len() == 1 {
            avg = pieces[0].1.clamped(spec.actuator_limit);
        }
        if ou {
            let mut a = state.to_array();
            for i in 0..6 {
                dist[i] = ou_step(
                    dist[i],
                    spec.disturbance.rate[i],
                    spec.disturbance.sigma[i],
                    dk,
                    &mut rng,
                );
                a[i] += dk * dist[i];
            }
            state = DynState::from_array(a);
            state.theta = wrap_angle(state.theta);
        }
        t += dk;
        let truth = state.to_robot();

        let encoder = WheelCmd::new(
            avg.right + gauss(&mut rng, n.encoder),
            avg.left + gauss(&mut rng, n.encoder),
        );
        bias += gauss(&mut rng, n.imu_bias_walk * dk.sqrt());
        let imu_yaw_rate = truth.omega + bias + gauss(&mut rng, n.imu_yaw_rate);

        let hifi = if t >= next_hifi {
            while next_hifi <= t {
                next_hifi += spec.rates.draw(spec.rates.high_hz, &mut rng);
            }
            Some(RobotState {
                x: truth.x + gauss(&mut rng, n.hifi_position),
                y: truth.y + gauss(&mut rng, n.hifi_position),
                theta: wrap_angle(truth.theta + gauss(&mut rng, n.hifi_heading)),
                vx: truth.vx + gauss(&mut rng, n.hifi_velocity),
                vy: truth.vy + gauss(&mut rng, n.hifi_velocity),
                omega: truth.omega + gauss(&mut rng, n.hifi_yaw_rate),
            })
        } else {
            None
        };

        out.truth.push(GroundTruthFrame {
            t,
            state: truth,
            body: (state.u, state.v),
            disturbance: if ou { dist } else { [0.0; 6] },
        });
        out.sensors.push(SensorFrame {
            t,
            dk,
            encoder,
            imu_yaw_rate,
            hifi,
        });
    }
    Ok(out)
}

/// Chains [`g1_step`] over the encoder readings. Element `k` is the estimate
/// at `frames[k].t`.
pub fn dead_reckon(
    frames: &[SensorFrame],
    params: &KinematicParams,
    initial: RobotState,
) -> Result<Vec<RobotState>, SimError> {
    if frames.is_empty() {
        return Err(SimError::EmptyStream);
    }
    let mut s = initial;
    let mut out = Vec::with_capacity(frames.len());
    for (index, f) in frames.iter().enumerate() {
        if !(f.dk > 0.0) {
            return Err(SimError::BadFrame { index });
        }
        s = g1_step(&s, f.encoder, params, f.dk)?;
        out.push(s);
    }
    Ok(out)
}
