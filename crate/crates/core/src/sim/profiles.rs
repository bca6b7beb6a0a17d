//! Built-in command schedules.
//!
//! `g2` is force driven with no longitudinal drag, so every maneuver is a
//! pulse pair: an acceleration pulse is matched by an equal and opposite
//! braking pulse and a yaw-up pulse by a yaw-down pulse. Between pulses the
//! platform coasts or rests. Under `g1` each pair integrates to zero, so the
//! kinematic model returns to its start at the end of every maneuver.
//!
//! Turning while moving is unstable in `g2` (lateral slip feeds forward speed
//! at a rate that grows with the square of the yaw rate), so pivots are slow
//! and happen at rest.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI};

#[allow(unused_imports)] // inherent f64 math shadows it when std is linked
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Segment, SimError, TrajectoryProfile};
use crate::physics::{g2_step, DynState, KinematicParams, DEFAULT_ACTUATOR_LIMIT};

pub const BUILTIN_NAMES: [&str; 4] = ["straight", "arc", "figure-eight", "random-teleop"];

/// Duration of each half of a `(+d, -d)` / `(-d, +d)` pulse pair that turns
/// `g2` in place by `|angle|`.
pub fn pivot_duration(angle: f64, d: f64, p: &KinematicParams) -> f64 {
    let yaw_acc = p.track * p.c_t * 2.0 * d / p.inertia;
    (angle.abs() / yaw_acc).sqrt()
}

fn dash(a: f64, pulse: f64, coast: f64) -> [Segment; 3] {
    [
        Segment::new(pulse, a, a),
        Segment::new(coast, 0.0, 0.0),
        Segment::new(pulse, -a, -a),
    ]
}

fn pivot(angle: f64, d: f64) -> [Segment; 2] {
    let tau = pivot_duration(angle, d, &KinematicParams::default());
    let s = d * angle.signum();
    [Segment::new(tau, s, -s), Segment::new(tau, -s, s)]
}

fn rest(t: f64) -> Segment {
    Segment::new(t, 0.0, 0.0)
}

fn straight() -> Vec<Segment> {
    let mut s = Vec::new();
    s.extend(dash(2.0, 0.3, 2.0));
    s.push(rest(0.5));
    s.extend(dash(-2.0, 0.3, 2.0));
    s.push(rest(0.5));
    s
}

fn figure_eight() -> Vec<Segment> {
    let mut s = Vec::new();
    for side in [1.0, -1.0] {
        for _ in 0..4 {
            s.extend(dash(2.0, 0.3, 1.5));
            s.push(rest(0.2));
            s.extend(pivot(side * FRAC_PI_2, 0.25));
            s.push(rest(0.2));
        }
    }
    s
}

/// Rolls `g2` from rest through `segments` with fine RK4 steps.
fn settle(segments: &[Segment]) -> DynState {
    let p = KinematicParams::default();
    let mut s = DynState::default();
    for g in segments {
        let n = (g.duration / 1e-3).ceil() as usize;
        let h = g.duration / n as f64;
        for _ in 0..n {
            s = g2_step(&s, g.cmd, &p, h).expect("positive step");
        }
    }
    s
}

/// Curved dash: yaw rate is raised, the platform accelerates and coasts while
/// turning, yaw rate is removed, then a braking pulse sized from a fine `g2`
/// rollout cancels the remaining forward speed.
fn arc_turn(d: f64, a: f64, coast: f64) -> Vec<Segment> {
    let mut s = Vec::from([
        Segment::new(0.3, d, -d),
        Segment::new(0.3, a, a),
        rest(coast),
        Segment::new(0.3, -d, d),
    ]);
    let u = settle(&s).u;
    let p = KinematicParams::default();
    let brake = u.abs() * p.mass / (p.c_t * a.abs());
    if brake > 1e-6 {
        let b = -a.abs() * u.signum();
        s.push(Segment::new(brake, b, b));
    }
    s.push(rest(4.0));
    s
}

fn arc() -> Vec<Segment> {
    let mut s = arc_turn(0.5, 2.0, 2.0);
    s.extend(arc_turn(-0.5, 2.0, 2.0));
    s
}

/// Seeded random sequence of dashes, pivots and pauses, about two minutes
/// long. Curved dashes are left out: the slip they leave behind is amplified
/// by every later pivot.
fn random_teleop(seed: u64) -> Vec<Segment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Vec::new();
    let mut total = 0.0;
    while total < 120.0 {
        let pick: f64 = rng.random();
        let start = s.len();
        if pick < 0.45 {
            let dir = if rng.random_bool(0.8) { 1.0 } else { -1.0 };
            let a = dir * rng.random_range(1.0..3.0);
            s.extend(dash(
                a,
                rng.random_range(0.2..0.4),
                rng.random_range(0.5..2.5),
            ));
        } else if pick < 0.85 {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let angle = side * rng.random_range(PI / 6.0..FRAC_PI_2);
            s.extend(pivot(angle, rng.random_range(0.1..0.25)));
        } else {
            s.push(rest(rng.random_range(0.2..1.0)));
        }
        total += s[start..].iter().map(|g| g.duration).sum::<f64>();
    }
    for g in &mut s {
        g.cmd = g.cmd.clamped(DEFAULT_ACTUATOR_LIMIT);
    }
    s
}

/// Looks up a built-in profile. `seed` only affects `random-teleop`.
pub fn builtin_profile(name: &str, seed: u64) -> Result<TrajectoryProfile, SimError> {
    let schedule = match name {
        "straight" => straight(),
        "arc" => arc(),
        "figure-eight" => figure_eight(),
        "random-teleop" => random_teleop(seed),
        other => return Err(SimError::UnknownProfile(other.to_string())),
    };
    TrajectoryProfile::new(String::from(name), schedule)
}

pub fn builtin_profiles(seed: u64) -> Vec<TrajectoryProfile> {
    BUILTIN_NAMES
        .iter()
        .map(|n| builtin_profile(n, seed).expect("built-in profile"))
        .collect()
}
