//! Unscented Kalman filter used as the high-fidelity label oracle.
//!
//! [`Ukf`] is generic over the state dimension and knows which state entry (if
//! any) is an angle. [`run_fusion`] specializes it to the planar robot with
//! `g2` as the process model and three measurement models: wheel odometry
//! through `g1`, IMU yaw rate and the sparse high-fidelity pose + twist.

use alloc::vec::Vec;

#[allow(unused_imports)] // inherent f64 math shadows it when std is linked
use num_traits::Float;
use nalgebra::{SMatrix, SVector};

use crate::physics::{
    g1_derivative, g2_step, wrap_angle, DynState, KinematicParams, PhysicsError, RobotState,
    WheelCmd,
};
use crate::sim::{SensorFrame, SensorNoiseSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum UkfError {
    #[error("covariance is not positive semi-definite even after jitter")]
    NotPsd,
    #[error("innovation covariance is singular even after jitter")]
    SingularInnovation,
    #[error("UKF parameter out of range: {0}")]
    BadParameter(&'static str),
    #[error("filter state became non-finite")]
    NonFinite,
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

/// Diagonal jitter added once when a factorization fails.
pub const JITTER: f64 = 1e-9;

/// Scaled unscented transform parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UtParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UtParams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

impl UtParams {
    pub fn validate(&self, n: usize) -> Result<(), UkfError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(UkfError::BadParameter("alpha must lie in (0, 1]"));
        }
        if !(n as f64 + self.kappa > 0.0) || !self.beta.is_finite() {
            return Err(UkfError::BadParameter("n + kappa must be positive"));
        }
        Ok(())
    }

    fn lambda(&self, n: usize) -> f64 {
        self.alpha * self.alpha * (n as f64 + self.kappa) - n as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Belief<const N: usize> {
    pub mean: SVector<f64, N>,
    pub cov: SMatrix<f64, N, N>,
}

impl<const N: usize> Belief<N> {
    pub fn new(mean: SVector<f64, N>, cov: SMatrix<f64, N, N>) -> Self {
        Self { mean, cov }
    }

    pub fn trace(&self) -> f64 {
        self.cov.trace()
    }
}

/// `2N + 1` points with mean and covariance weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaPoints<const N: usize> {
    pub points: Vec<SVector<f64, N>>,
    pub wm: Vec<f64>,
    pub wc: Vec<f64>,
}

fn factor<const N: usize>(a: &SMatrix<f64, N, N>, strict: bool) -> Option<SMatrix<f64, N, N>> {
    let scale = (0..N).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    let tol = 1e-12 * scale.max(1e-300);
    let mut l = SMatrix::<f64, N, N>::zeros();
    for j in 0..N {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !d.is_finite() || d < -tol || (strict && d <= tol) {
            return None;
        }
        if d <= tol {
            for i in j + 1..N {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if s.abs() > tol.sqrt() * scale.sqrt() + tol {
                    return None;
                }
            }
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..N {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

/// Lower Cholesky factor of a PSD matrix. Zero pivots are allowed (their
/// column is zero). On failure `JITTER * I` is added once before giving up.
pub fn cholesky_psd<const N: usize>(
    a: &SMatrix<f64, N, N>,
) -> Result<SMatrix<f64, N, N>, UkfError> {
    factor(a, false)
        .or_else(|| factor(&(a + SMatrix::<f64, N, N>::identity() * JITTER), false))
        .ok_or(UkfError::NotPsd)
}

fn symmetrize<const N: usize>(m: &SMatrix<f64, N, N>) -> SMatrix<f64, N, N> {
    (m + m.transpose()) * 0.5
}

/// Weighted mean of vectors; entry `angle` is averaged on the circle.
fn weighted_mean<const D: usize>(
    pts: &[SVector<f64, D>],
    w: &[f64],
    angle: Option<usize>,
) -> SVector<f64, D> {
    let mut m = SVector::<f64, D>::zeros();
    for (p, wi) in pts.iter().zip(w) {
        m += p * *wi;
    }
    if let Some(a) = angle {
        let (mut s, mut c) = (0.0, 0.0);
        for (p, wi) in pts.iter().zip(w) {
            s += wi * p[a].sin();
            c += wi * p[a].cos();
        }
        m[a] = s.atan2(c);
    }
    m
}

fn diff<const D: usize>(
    a: &SVector<f64, D>,
    b: &SVector<f64, D>,
    angle: Option<usize>,
) -> SVector<f64, D> {
    let mut d = a - b;
    if let Some(i) = angle {
        d[i] = wrap_angle(d[i]);
    }
    d
}

/// Filter over an `N`-dimensional state. `angle` marks a state entry that
/// lives on the circle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ukf<const N: usize> {
    pub params: UtParams,
    pub angle: Option<usize>,
}

impl<const N: usize> Ukf<N> {
    pub fn new(params: UtParams, angle: Option<usize>) -> Result<Self, UkfError> {
        params.validate(N)?;
        Ok(Self { params, angle })
    }

    pub fn sigma_points(&self, b: &Belief<N>) -> Result<SigmaPoints<N>, UkfError> {
        let lambda = self.params.lambda(N);
        let c = N as f64 + lambda;
        let l = cholesky_psd(&(b.cov * c))?;
        let mut points = Vec::with_capacity(2 * N + 1);
        points.push(b.mean);
        for i in 0..N {
            points.push(b.mean + l.column(i));
        }
        for i in 0..N {
            points.push(b.mean - l.column(i));
        }
        if let Some(a) = self.angle {
            for p in &mut points {
                p[a] = wrap_angle(p[a]);
            }
        }
        let w = 0.5 / c;
        let mut wm = alloc::vec![w; 2 * N + 1];
        let mut wc = wm.clone();
        wm[0] = lambda / c;
        wc[0] = lambda / c + (1.0 - self.params.alpha * self.params.alpha + self.params.beta);
        Ok(SigmaPoints { points, wm, wc })
    }

    /// Propagates through `f` and adds `q` (already scaled by the step).
    pub fn predict<F>(
        &self,
        b: &Belief<N>,
        mut f: F,
        q: &SMatrix<f64, N, N>,
    ) -> Result<Belief<N>, UkfError>
    where
        F: FnMut(&SVector<f64, N>) -> Result<SVector<f64, N>, UkfError>,
    {
        let sp = self.sigma_points(b)?;
        let mut prop = Vec::with_capacity(sp.points.len());
        for p in &sp.points {
            prop.push(f(p)?);
        }
        let mean = weighted_mean(&prop, &sp.wm, self.angle);
        let mut cov = *q;
        for (p, w) in prop.iter().zip(&sp.wc) {
            let d = diff(p, &mean, self.angle);
            cov += d * d.transpose() * *w;
        }
        finish(Belief::new(mean, symmetrize(&cov)))
    }

    /// Standard UT measurement update. `z_angle` marks a measurement entry on
    /// the circle.
    pub fn update<const M: usize, H>(
        &self,
        b: &Belief<N>,
        z: &SVector<f64, M>,
        mut h: H,
        r: &SMatrix<f64, M, M>,
        z_angle: Option<usize>,
    ) -> Result<Belief<N>, UkfError>
    where
        H: FnMut(&SVector<f64, N>) -> SVector<f64, M>,
    {
        let sp = self.sigma_points(b)?;
        let zs: Vec<SVector<f64, M>> = sp.points.iter().map(&mut h).collect();
        let z_mean = weighted_mean(&zs, &sp.wm, z_angle);
        let mut s = *r;
        let mut c = SMatrix::<f64, N, M>::zeros();
        for ((x, zi), w) in sp.points.iter().zip(&zs).zip(&sp.wc) {
            let dz = diff(zi, &z_mean, z_angle);
            let dx = diff(x, &b.mean, self.angle);
            s += dz * dz.transpose() * *w;
            c += dx * dz.transpose() * *w;
        }
        let s = symmetrize(&s);
        let l = factor(&s, true)
            .or_else(|| factor(&(s + SMatrix::<f64, M, M>::identity() * JITTER), true))
            .ok_or(UkfError::SingularInnovation)?;
        let s_inv = {
            let chol = nalgebra::Cholesky::pack_dirty(l);
            chol.inverse()
        };
        let k = c * s_inv;
        let innov = diff(z, &z_mean, z_angle);
        let mut mean = b.mean + k * innov;
        if let Some(a) = self.angle {
            mean[a] = wrap_angle(mean[a]);
        }
        let cov = b.cov - k * s * k.transpose();
        finish(Belief::new(mean, symmetrize(&cov)))
    }
}

fn finish<const N: usize>(b: Belief<N>) -> Result<Belief<N>, UkfError> {
    if b.mean.iter().all(|v| v.is_finite()) && b.cov.iter().all(|v| v.is_finite()) {
        Ok(b)
    } else {
        Err(UkfError::NonFinite)
    }
}

pub type Vec6 = SVector<f64, 6>;
pub type Mat6 = SMatrix<f64, 6, 6>;

pub fn state_vec(s: &RobotState) -> Vec6 {
    Vec6::from(s.to_array())
}

pub fn vec_state(v: &Vec6) -> RobotState {
    RobotState::from_slice(v.as_slice())
}

/// Filter configuration for the planar robot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UkfConfig {
    pub ut: UtParams,
    /// Process noise spectral density per state, multiplied by `dk`.
    pub q: [f64; 6],
    /// Wheel-odometry variance on `(x_dot, y_dot, theta_dot)`.
    pub r_wheel: [f64; 3],
    /// IMU yaw-rate variance.
    pub r_imu: f64,
    /// High-fidelity pose + twist variance.
    pub r_hifi: [f64; 6],
    /// Initial covariance diagonal.
    pub p0: [f64; 6],
    pub use_wheel: bool,
    pub use_imu: bool,
    pub use_hifi: bool,
}

/// Variance added to the wheel-odometry channel for the gap between the
/// kinematic `g1` velocities and the dynamic platform.
pub const DEFAULT_WHEEL_MISMATCH: f64 = 1.0;

impl UkfConfig {
    /// Measurement variances are the sensor variances of `noise`; the wheel
    /// channel is propagated through `g1` and inflated by `wheel_mismatch`.
    pub fn from_noise(
        noise: &SensorNoiseSpec,
        params: &KinematicParams,
        wheel_mismatch: f64,
    ) -> Self {
        let enc2 = noise.encoder * noise.encoder;
        let v_var = 0.5 * params.wheel_radius * params.wheel_radius * enc2;
        let w_var = 2.0 * (params.wheel_radius / params.track).powi(2) * enc2;
        let floor = |v: f64| v.max(1e-10);
        Self {
            ut: UtParams::default(),
            q: [1e-4; 6],
            r_wheel: [
                floor(v_var + wheel_mismatch),
                floor(v_var + wheel_mismatch),
                floor(w_var + wheel_mismatch),
            ],
            r_imu: floor(noise.imu_yaw_rate.powi(2) + 1e-4),
            r_hifi: [
                floor(noise.hifi_position.powi(2)),
                floor(noise.hifi_position.powi(2)),
                floor(noise.hifi_heading.powi(2)),
                floor(noise.hifi_velocity.powi(2)),
                floor(noise.hifi_velocity.powi(2)),
                floor(noise.hifi_yaw_rate.powi(2)),
            ],
            p0: [1e-6; 6],
            use_wheel: true,
            use_imu: true,
            use_hifi: true,
        }
    }

    pub fn validate(&self) -> Result<(), UkfError> {
        self.ut.validate(6)?;
        let pos = |v: &f64| *v > 0.0 && v.is_finite();
        if !self.q.iter().all(pos) {
            return Err(UkfError::BadParameter("Q diagonal must be positive"));
        }
        if !(self.r_wheel.iter().all(pos) && pos(&self.r_imu) && self.r_hifi.iter().all(pos)) {
            return Err(UkfError::BadParameter("R diagonal must be positive"));
        }
        if !self.p0.iter().all(|v| *v >= 0.0 && v.is_finite()) {
            return Err(UkfError::BadParameter("initial covariance must be non-negative"));
        }
        Ok(())
    }
}

impl Default for UkfConfig {
    fn default() -> Self {
        Self::from_noise(
            &SensorNoiseSpec::default(),
            &KinematicParams::default(),
            DEFAULT_WHEEL_MISMATCH,
        )
    }
}

/// `g2` process model on the inertial state vector.
pub fn g2_process(
    x: &Vec6,
    cmd: WheelCmd,
    params: &KinematicParams,
    dk: f64,
) -> Result<Vec6, UkfError> {
    let s = DynState::from_robot(&vec_state(x));
    let next = g2_step(&s, cmd, params, dk)?;
    Ok(state_vec(&next.to_robot()))
}

/// Planar robot filter: the generic filter plus the robot measurement models.
#[derive(Clone, Debug)]
pub struct RobotUkf {
    pub filter: Ukf<6>,
    pub config: UkfConfig,
    pub params: KinematicParams,
    pub belief: Belief<6>,
}

impl RobotUkf {
    pub fn new(
        config: UkfConfig,
        params: KinematicParams,
        initial: RobotState,
    ) -> Result<Self, UkfError> {
        config.validate()?;
        params.validate()?;
        Ok(Self {
            filter: Ukf::new(config.ut, Some(RobotState::HEADING))?,
            config,
            params,
            belief: Belief::new(state_vec(&initial), Mat6::from_diagonal(&Vec6::from(config.p0))),
        })
    }

    pub fn predict(&mut self, cmd: WheelCmd, dk: f64) -> Result<(), UkfError> {
        let q = Mat6::from_diagonal(&Vec6::from(self.config.q)) * dk;
        let params = self.params;
        self.belief = self
            .filter
            .predict(&self.belief, |x| g2_process(x, cmd, &params, dk), &q)?;
        Ok(())
    }

    /// Inertial velocities and yaw rate implied by the encoders through `g1`
    /// at the current mean heading.
    pub fn update_wheel(&mut self, enc: WheelCmd) -> Result<(), UkfError> {
        let heading = RobotState {
            theta: self.belief.mean[2],
            ..Default::default()
        };
        let z = SVector::<f64, 3>::from(g1_derivative(&heading, enc, &self.params));
        let r = SMatrix::<f64, 3, 3>::from_diagonal(&SVector::from(self.config.r_wheel));
        self.belief = self.filter.update(
            &self.belief,
            &z,
            |x| SVector::<f64, 3>::new(x[3], x[4], x[5]),
            &r,
            None,
        )?;
        Ok(())
    }

    pub fn update_imu(&mut self, yaw_rate: f64) -> Result<(), UkfError> {
        let z = SVector::<f64, 1>::new(yaw_rate);
        let r = SMatrix::<f64, 1, 1>::new(self.config.r_imu);
        self.belief = self
            .filter
            .update(&self.belief, &z, |x| SVector::<f64, 1>::new(x[5]), &r, None)?;
        Ok(())
    }

    pub fn update_hifi(&mut self, obs: &RobotState) -> Result<(), UkfError> {
        let r = Mat6::from_diagonal(&Vec6::from(self.config.r_hifi));
        self.belief = self.filter.update(
            &self.belief,
            &state_vec(obs),
            |x| *x,
            &r,
            Some(RobotState::HEADING),
        )?;
        Ok(())
    }

    /// Predict over the frame's interval, then apply every enabled update.
    pub fn step(&mut self, frame: &SensorFrame) -> Result<RobotState, UkfError> {
        self.predict(frame.encoder, frame.dk)?;
        if self.config.use_wheel {
            self.update_wheel(frame.encoder)?;
        }
        if self.config.use_imu {
            self.update_imu(frame.imu_yaw_rate)?;
        }
        if self.config.use_hifi {
            if let Some(h) = &frame.hifi {
                self.update_hifi(h)?;
            }
        }
        Ok(self.mean())
    }

    pub fn mean(&self) -> RobotState {
        vec_state(&self.belief.mean)
    }
}

/// Fused posterior means, one per frame: the high-fidelity labels.
pub fn run_fusion(
    frames: &[SensorFrame],
    config: &UkfConfig,
    params: &KinematicParams,
    initial: RobotState,
) -> Result<Vec<RobotState>, UkfError> {
    let mut ukf = RobotUkf::new(*config, *params, initial)?;
    frames.iter().map(|f| ukf.step(f)).collect()
}
