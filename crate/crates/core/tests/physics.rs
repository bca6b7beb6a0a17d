use core::f64::consts::{FRAC_PI_2, PI};

use mfrpinp_core::physics::{
    body_forces, g1_derivative, g1_step, g2_derivative, g2_step, wrap_angle, DynState,
    KinematicParams, PhysicsError, RobotState, WheelCmd,
};
use proptest::prelude::*;

fn p() -> KinematicParams {
    KinematicParams::default()
}

#[test]
fn g1_straight_line_derivative() {
    let d = g1_derivative(&RobotState::default(), WheelCmd::new(10.0, 10.0), &p());
    assert!((d[0] - 0.34).abs() < 1e-12);
    assert_eq!(d[1], 0.0);
    assert_eq!(d[2], 0.0);
    assert_eq!(
        g1_derivative(&RobotState::default(), WheelCmd::new(0.0, 0.0), &p()),
        [0.0; 3]
    );
    let spin = g1_derivative(&RobotState::default(), WheelCmd::new(3.0, -3.0), &p());
    assert_eq!(spin[0], 0.0);
    assert_eq!(spin[1], 0.0);
    assert!((spin[2] - 0.034 / 0.288 * 6.0).abs() < 1e-12);
}

#[test]
fn g1_euler_step() {
    let s = g1_step(&RobotState::default(), WheelCmd::new(10.0, 10.0), &p(), 1.0).unwrap();
    assert!((s.x - 0.34).abs() < 1e-12);
    assert!((s.vx - 0.34).abs() < 1e-12);
    assert_eq!(
        g1_step(&RobotState::default(), WheelCmd::new(1.0, 1.0), &p(), 0.0),
        Err(PhysicsError::BadStep(0.0))
    );
    assert!(g1_step(&RobotState::default(), WheelCmd::new(1.0, 1.0), &p(), -0.1).is_err());
    let cmd = WheelCmd::new(7.0, 7.0);
    let half = g1_step(&RobotState::default(), cmd, &p(), 0.5).unwrap();
    let two = g1_step(&half, cmd, &p(), 0.5).unwrap();
    let one = g1_step(&RobotState::default(), cmd, &p(), 1.0).unwrap();
    assert!((two.x - one.x).abs() < 1e-12);
    assert_eq!(two.y, one.y);
}

#[test]
fn g2_forces_and_accelerations() {
    let f = body_forces(WheelCmd::new(10.0, 10.0), 0.0, 0.0, &p());
    assert_eq!((f.fx, f.fy, f.mz), (150.0, 0.0, 0.0));
    let d = g2_derivative(&DynState::default(), WheelCmd::new(10.0, 10.0), &p());
    assert!((d[3] - 14.018691588785046).abs() < 1e-12);
    assert_eq!(d[4], 0.0);
    assert_eq!(d[5], 0.0);
    assert_eq!(
        g2_derivative(&DynState::default(), WheelCmd::default(), &p()),
        [0.0; 6]
    );
    let s = DynState {
        theta: FRAC_PI_2,
        u: 1.0,
        ..Default::default()
    };
    let d = g2_derivative(&s, WheelCmd::default(), &p());
    assert!(d[0].abs() < 1e-15);
    assert!((d[1] - 1.0).abs() < 1e-15);
    let lateral = body_forces(WheelCmd::default(), 0.0, 0.4, &p());
    assert_eq!(lateral.fy, -11.5 * 0.4);
}

#[test]
fn g2_from_rest_grows_linearly() {
    let cmd = WheelCmd::new(10.0, 10.0);
    let a = 150.0 / 10.7;
    let mut s = DynState::default();
    let h = 0.02;
    for k in 1..=50 {
        s = g2_step(&s, cmd, &p(), h).unwrap();
        let t = k as f64 * h;
        assert!((s.u - a * t).abs() < 1e-12);
        assert!((s.x - 0.5 * a * t * t).abs() < 1e-12);
        assert_eq!((s.y, s.theta, s.v, s.omega), (0.0, 0.0, 0.0, 0.0));
    }
}

fn rollout(h: f64, steps: usize) -> DynState {
    let cmd = WheelCmd::new(6.0, 2.0);
    let mut s = DynState {
        u: 0.8,
        v: 0.1,
        omega: 0.3,
        ..Default::default()
    };
    for _ in 0..steps {
        s = g2_step(&s, cmd, &p(), h).unwrap();
    }
    s
}

fn dist(a: &DynState, b: &DynState) -> f64 {
    let (x, y) = (a.to_array(), b.to_array());
    x.iter()
        .zip(y.iter())
        .map(|(p, q)| (p - q).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn g2_rk4_converges_with_order_four() {
    let horizon = 0.8;
    let reference = rollout(horizon / 6400.0, 6400);
    let errs: Vec<f64> = [20usize, 40, 80]
        .iter()
        .map(|n| dist(&rollout(horizon / *n as f64, *n), &reference))
        .collect();
    for w in errs.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!(order >= 3.9, "order {order}, errors {errs:?}");
    }
}

#[test]
fn g2_step_halving_at_fifty_hz() {
    let cmd = WheelCmd::new(6.0, 2.0);
    let s0 = DynState {
        u: 0.8,
        v: 0.1,
        omega: 0.3,
        ..Default::default()
    };
    let full = g2_step(&s0, cmd, &p(), 0.02).unwrap();
    let half = g2_step(&g2_step(&s0, cmd, &p(), 0.01).unwrap(), cmd, &p(), 0.01).unwrap();
    assert!(dist(&full, &half) < 1e-8);
    assert!(g2_step(&s0, cmd, &p(), 0.0).is_err());
}

#[test]
fn body_velocity_round_trip() {
    let s = RobotState {
        theta: 0.7,
        vx: 0.3,
        vy: -0.2,
        omega: 0.1,
        ..Default::default()
    };
    let back = DynState::from_robot(&s).to_robot();
    assert!((back.vx - s.vx).abs() < 1e-15 && (back.vy - s.vy).abs() < 1e-15);
}

#[test]
fn wrap_angle_edges() {
    assert_eq!(wrap_angle(PI), PI);
    assert_eq!(wrap_angle(-PI), PI);
    assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
    assert!((wrap_angle(0.5 + 4.0 * PI) - 0.5).abs() < 1e-12);
    assert_eq!(wrap_angle(0.0), 0.0);
}

#[test]
fn invalid_params_rejected() {
    let mut bad = p();
    bad.inertia = 0.0;
    assert_eq!(bad.validate(), Err(PhysicsError::BadParam("inertia")));
    assert!(p().validate().is_ok());
}

proptest! {
    #[test]
    fn wrap_angle_range(theta in -1e4f64..1e4) {
        let w = wrap_angle(theta);
        prop_assert!(w > -PI && w <= PI);
        let turns = (theta - w) / (2.0 * PI);
        prop_assert!((turns - turns.round()).abs() < 1e-9);
    }

    #[test]
    fn g1_heading_equivariance(theta in -3.0f64..3.0, phi in -3.0f64..3.0,
                               wr in -25.0f64..25.0, wl in -25.0f64..25.0) {
        let cmd = WheelCmd::new(wr, wl);
        let a = g1_derivative(&RobotState { theta, ..Default::default() }, cmd, &p());
        let b = g1_derivative(&RobotState { theta: theta + phi, ..Default::default() }, cmd, &p());
        let (s, c) = phi.sin_cos();
        prop_assert!((b[0] - (c * a[0] - s * a[1])).abs() < 1e-12);
        prop_assert!((b[1] - (s * a[0] + c * a[1])).abs() < 1e-12);
        prop_assert_eq!(a[2], b[2]);
    }

    #[test]
    fn g2_straight_line_invariance(w in -25.0f64..25.0, u0 in -2.0f64..2.0,
                                   steps in 1usize..200, h in 0.005f64..0.05) {
        let mut s = DynState { u: u0, ..Default::default() };
        for _ in 0..steps {
            s = g2_step(&s, WheelCmd::new(w, w), &p(), h).unwrap();
            prop_assert_eq!(s.v, 0.0);
            prop_assert_eq!(s.omega, 0.0);
            prop_assert_eq!(s.y, 0.0);
            prop_assert_eq!(s.theta, 0.0);
        }
    }

    #[test]
    fn steps_keep_heading_wrapped(theta in -3.14f64..3.14, wr in -25.0f64..25.0,
                                  wl in -25.0f64..25.0, h in 0.001f64..0.5) {
        let cmd = WheelCmd::new(wr, wl);
        let r = RobotState { theta, ..Default::default() };
        let t1 = g1_step(&r, cmd, &p(), h).unwrap().theta;
        let t2 = g2_step(&DynState::from_robot(&r), cmd, &p(), h).unwrap().theta;
        prop_assert!(t1 > -PI && t1 <= PI);
        prop_assert!(t2 > -PI && t2 <= PI);
    }
}
