//! Physics priors: the differential-drive kinematic model `g1` and the planar
//! Newton-Euler skid-steer model `g2`.

use core::f64::consts::PI;

#[allow(unused_imports)] // inherent f64 math shadows it when std is linked
use num_traits::Float;

/// Default wheel-rate magnitude limit, rad/s.
pub const DEFAULT_ACTUATOR_LIMIT: f64 = 25.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PhysicsError {
    #[error("time step must be positive and finite (got {0})")]
    BadStep(f64),
    #[error("kinematic parameter `{0}` must be positive and finite")]
    BadParam(&'static str),
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    if !theta.is_finite() {
        return theta;
    }
    let mut w = theta - 2.0 * PI * ((theta - PI) / (2.0 * PI)).ceil();
    if w <= -PI {
        w += 2.0 * PI;
    }
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Planar state in the inertial frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
}

impl RobotState {
    pub const DIM: usize = 6;
    /// Index of the heading in [`RobotState::to_array`].
    pub const HEADING: usize = 2;

    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.theta, self.vx, self.vy, self.omega]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            theta: a[2],
            vx: a[3],
            vy: a[4],
            omega: a[5],
        }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        let mut a = [0.0; 6];
        a.copy_from_slice(&s[..6]);
        Self::from_array(a)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn wrapped(mut self) -> Self {
        self.theta = wrap_angle(self.theta);
        self
    }

    /// Body-frame velocities `(u_b, v_b)`.
    pub fn body_velocity(&self) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (c * self.vx + s * self.vy, -s * self.vx + c * self.vy)
    }
}

/// Wheel angular rates, right then left.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WheelCmd {
    pub right: f64,
    pub left: f64,
}

impl WheelCmd {
    pub fn new(right: f64, left: f64) -> Self {
        Self { right, left }
    }

    pub fn clamped(self, limit: f64) -> Self {
        Self {
            right: self.right.clamp(-limit, limit),
            left: self.left.clamp(-limit, limit),
        }
    }

    pub fn within(&self, limit: f64) -> bool {
        self.right.abs() <= limit && self.left.abs() <= limit
    }
}

/// Rigid-body and traction parameters of the platform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KinematicParams {
    /// kg
    pub mass: f64,
    /// m
    pub wheel_radius: f64,
    /// m
    pub track: f64,
    /// kg m^2
    pub inertia: f64,
    /// N s/m
    pub c_t: f64,
    /// N s/m
    pub c_alpha: f64,
}

impl Default for KinematicParams {
    fn default() -> Self {
        Self {
            mass: 10.7,
            wheel_radius: 0.034,
            track: 0.288,
            inertia: 4.35,
            c_t: 15.0,
            c_alpha: 11.5,
        }
    }
}

impl KinematicParams {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        let fields = [
            ("mass", self.mass),
            ("wheel_radius", self.wheel_radius),
            ("track", self.track),
            ("inertia", self.inertia),
            ("c_t", self.c_t),
            ("c_alpha", self.c_alpha),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PhysicsError::BadParam(name));
            }
        }
        Ok(())
    }
}

/// Forces and moment acting on the body, with the body velocities they were
/// evaluated at.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BodyForces {
    pub fx: f64,
    pub fy: f64,
    pub mz: f64,
    pub u: f64,
    pub v: f64,
}

pub fn body_forces(cmd: WheelCmd, u: f64, v: f64, p: &KinematicParams) -> BodyForces {
    BodyForces {
        fx: 0.5 * p.c_t * (cmd.right + cmd.left),
        fy: -p.c_alpha * v,
        mz: p.track * p.c_t * (cmd.right - cmd.left),
        u,
        v,
    }
}

fn check_step(dk: f64) -> Result<(), PhysicsError> {
    if dk > 0.0 && dk.is_finite() {
        Ok(())
    } else {
        Err(PhysicsError::BadStep(dk))
    }
}

/// `(x_dot, y_dot, theta_dot)` of the differential-drive model.
pub fn g1_derivative(state: &RobotState, cmd: WheelCmd, p: &KinematicParams) -> [f64; 3] {
    let (s, c) = state.theta.sin_cos();
    let speed = 0.5 * p.wheel_radius * (cmd.right + cmd.left);
    [
        speed * c,
        speed * s,
        p.wheel_radius / p.track * (cmd.right - cmd.left),
    ]
}

/// One explicit Euler step of `g1`. The velocity fields of the result are the
/// derivatives at the start of the step.
pub fn g1_step(
    state: &RobotState,
    cmd: WheelCmd,
    p: &KinematicParams,
    dk: f64,
) -> Result<RobotState, PhysicsError> {
    check_step(dk)?;
    let [dx, dy, dth] = g1_derivative(state, cmd, p);
    Ok(RobotState {
        x: state.x + dk * dx,
        y: state.y + dk * dy,
        theta: wrap_angle(state.theta + dk * dth),
        vx: dx,
        vy: dy,
        omega: dth,
    })
}

/// Integrator state of `g2`: pose, body-frame velocities and yaw rate.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DynState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub u: f64,
    pub v: f64,
    pub omega: f64,
}

impl DynState {
    /// Seeds body velocities by rotating the inertial velocities into the
    /// body frame.
    pub fn from_robot(s: &RobotState) -> Self {
        let (u, v) = s.body_velocity();
        Self {
            x: s.x,
            y: s.y,
            theta: s.theta,
            u,
            v,
            omega: s.omega,
        }
    }

    pub fn to_robot(&self) -> RobotState {
        let (s, c) = self.theta.sin_cos();
        RobotState {
            x: self.x,
            y: self.y,
            theta: self.theta,
            vx: c * self.u - s * self.v,
            vy: s * self.u + c * self.v,
            omega: self.omega,
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.theta, self.u, self.v, self.omega]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            theta: a[2],
            u: a[3],
            v: a[4],
            omega: a[5],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Time derivative of a [`DynState`] under `g2`, in the same field order.
pub fn g2_derivative(s: &DynState, cmd: WheelCmd, p: &KinematicParams) -> [f64; 6] {
    let f = body_forces(cmd, s.u, s.v, p);
    let (sn, cs) = s.theta.sin_cos();
    [
        cs * s.u - sn * s.v,
        sn * s.u + cs * s.v,
        s.omega,
        (f.fx - p.mass * s.v * s.omega) / p.mass,
        (f.fy - p.mass * s.u * s.omega) / p.mass,
        f.mz / p.inertia,
    ]
}

fn axpy(s: &[f64; 6], h: f64, k: &[f64; 6]) -> DynState {
    let mut out = *s;
    for i in 0..6 {
        out[i] += h * k[i];
    }
    DynState::from_array(out)
}

/// One classical RK4 step of `g2`, heading wrapped afterwards.
pub fn g2_step(
    state: &DynState,
    cmd: WheelCmd,
    p: &KinematicParams,
    dk: f64,
) -> Result<DynState, PhysicsError> {
    check_step(dk)?;
    let s = state.to_array();
    let k1 = g2_derivative(state, cmd, p);
    let k2 = g2_derivative(&axpy(&s, 0.5 * dk, &k1), cmd, p);
    let k3 = g2_derivative(&axpy(&s, 0.5 * dk, &k2), cmd, p);
    let k4 = g2_derivative(&axpy(&s, dk, &k3), cmd, p);
    let mut out = s;
    for i in 0..6 {
        out[i] += dk / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    let mut next = DynState::from_array(out);
    next.theta = wrap_angle(next.theta);
    Ok(next)
}
