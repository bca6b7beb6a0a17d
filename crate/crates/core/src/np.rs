//! The estimator model: an attentive latent neural process around the
//! kinematic prior (low fidelity) and a residual neural process around the
//! dynamic prior, fused by summing means and variances.
//!
//! All forward ops record onto a caller-supplied [`Tape`] so the learner can
//! assemble losses from the same building blocks used at inference.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent f64 math shadows it when std is linked
use num_traits::Float;
use rand::{Rng, RngCore, SeedableRng};

use crate::autodiff::checkpoint::Checkpoint;
use crate::autodiff::nn::{attend, Activation, Bind, Linear, Mlp};
use crate::autodiff::{
    reparameterized_sample, softplus_variance, AutodiffError, ParameterSet, Tape, Tensor, Var,
};
use crate::learner::TransitionLow;
use crate::physics::{body_forces, g1_step, wrap_angle, KinematicParams, PhysicsError, RobotState, WheelCmd};

/// Parameter-name prefix of the low-fidelity decoder, the part mirrored by
/// the frozen copy.
pub const LOW_DECODER_PREFIX: &str = "low/dec/";
const FROZEN_PREFIX: &str = "frozen:";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NpError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error("context set is empty")]
    EmptyContext,
    #[error("target set is empty")]
    EmptyTarget,
    #[error("{what}: {got} elements, expected {expected}")]
    Misaligned {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("variance must be positive and finite")]
    BadVariance,
    #[error("invalid model configuration: {0}")]
    BadConfig(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Diagonal Gaussian over the six state dimensions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianPrediction {
    pub mean: [f64; 6],
    pub var: [f64; 6],
}

impl GaussianPrediction {
    pub fn new(mean: [f64; 6], var: [f64; 6]) -> Result<Self, NpError> {
        if var.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(Self { mean, var })
        } else {
            Err(NpError::BadVariance)
        }
    }

    pub fn std(&self) -> [f64; 6] {
        self.var.map(f64::sqrt)
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.var).all(|v| v.is_finite())
    }
}

/// Sum of means and sum of variances, elementwise.
pub fn fuse(low: &GaussianPrediction, res: &GaussianPrediction) -> GaussianPrediction {
    let mut out = *low;
    for i in 0..6 {
        out.mean[i] += res.mean[i];
        out.var[i] += res.var[i];
    }
    out
}

/// `a - b` with the heading component wrapped.
pub fn state_difference(a: &[f64; 6], b: &[f64; 6]) -> [f64; 6] {
    let mut d = [0.0; 6];
    for i in 0..6 {
        d[i] = a[i] - b[i];
    }
    d[RobotState::HEADING] = wrap_angle(d[RobotState::HEADING]);
    d
}

/// Multipliers taking physical quantities to roughly unit-scale features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureScales {
    /// State inputs: x, y, theta, vx, vy, omega.
    pub state: [f64; 6],
    pub command: f64,
    pub dk: f64,
    pub force: f64,
    /// Units of the low decoder's offset and variance heads.
    pub low_out: [f64; 6],
    /// Units of the residual decoder's offset and variance heads.
    pub res_out: [f64; 6],
}

impl Default for FeatureScales {
    fn default() -> Self {
        Self {
            state: [0.1, 0.1, 1.0 / core::f64::consts::PI, 1.0, 1.0, 1.0],
            command: 1.0 / 25.0,
            dk: 50.0,
            force: 0.01,
            low_out: [1e3, 1e3, 1e3, 1e2, 1e2, 1e2],
            res_out: [1e3, 1e3, 1e3, 1e2, 1e2, 1e2],
        }
    }
}

impl FeatureScales {
    fn validate(&self) -> Result<(), NpError> {
        let all = self
            .state
            .iter()
            .chain(&self.low_out)
            .chain(&self.res_out)
            .chain([&self.command, &self.dk, &self.force]);
        for v in all {
            if !(*v > 0.0 && v.is_finite()) {
                return Err(NpError::BadConfig("feature scales must be positive"));
            }
        }
        Ok(())
    }

    fn state_row(&self, s: &[f64; 6]) -> [f64; 6] {
        let mut out = [0.0; 6];
        for i in 0..6 {
            out[i] = s[i] * self.state[i];
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NpConfig {
    /// Width of every hidden layer and embedding.
    pub hidden: usize,
    pub latent: usize,
    pub key_dim: usize,
    /// Sliding context window length at inference.
    pub context_window: usize,
    /// Below this many context transitions inference falls back to g1.
    pub min_context: usize,
    /// Use latent means instead of samples at inference.
    pub deterministic: bool,
    /// Standard deviation reported by the physics fallback.
    pub fallback_std: [f64; 6],
    pub scales: FeatureScales,
}

impl Default for NpConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            latent: 16,
            key_dim: 32,
            context_window: 32,
            min_context: 4,
            deterministic: true,
            fallback_std: [0.05, 0.05, 0.05, 0.1, 0.1, 0.1],
            scales: FeatureScales::default(),
        }
    }
}

impl NpConfig {
    pub fn validate(&self) -> Result<(), NpError> {
        if self.hidden == 0 || self.latent == 0 || self.key_dim == 0 {
            return Err(NpError::BadConfig("layer sizes must be positive"));
        }
        if self.context_window == 0 || self.min_context == 0 {
            return Err(NpError::BadConfig("context sizes must be positive"));
        }
        if self.min_context > self.context_window {
            return Err(NpError::BadConfig("min_context exceeds context_window"));
        }
        if !self.fallback_std.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(NpError::BadConfig("fallback_std must be positive"));
        }
        self.scales.validate()
    }
}

/// Low-fidelity context: wheel commands and the dead-reckoned state at which
/// each was applied.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSetLow {
    pub cmds: Vec<WheelCmd>,
    pub states: Vec<RobotState>,
}

impl ContextSetLow {
    pub fn new(cmds: Vec<WheelCmd>, states: Vec<RobotState>) -> Result<Self, NpError> {
        if cmds.is_empty() {
            return Err(NpError::EmptyContext);
        }
        if states.len() != cmds.len() {
            return Err(NpError::Misaligned {
                what: "context states",
                got: states.len(),
                expected: cmds.len(),
            });
        }
        Ok(Self { cmds, states })
    }

    pub fn from_transitions(ts: &[TransitionLow]) -> Result<Self, NpError> {
        Self::new(
            ts.iter().map(|t| t.cmd).collect(),
            ts.iter().map(|t| t.state).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.cmds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cmds.is_empty()
    }
}

/// Low-fidelity queries: step lengths, the g1 prediction for each, and the
/// dead-reckoned label when training.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSetLow {
    pub dks: Vec<f64>,
    pub priors: Vec<RobotState>,
    pub labels: Option<Vec<RobotState>>,
}

impl TargetSetLow {
    pub fn new(
        dks: Vec<f64>,
        priors: Vec<RobotState>,
        labels: Option<Vec<RobotState>>,
    ) -> Result<Self, NpError> {
        if dks.is_empty() {
            return Err(NpError::EmptyTarget);
        }
        if let Some(bad) = dks.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
            return Err(PhysicsError::BadStep(*bad).into());
        }
        if priors.len() != dks.len() {
            return Err(NpError::Misaligned {
                what: "target priors",
                got: priors.len(),
                expected: dks.len(),
            });
        }
        if let Some(l) = &labels {
            if l.len() != dks.len() {
                return Err(NpError::Misaligned {
                    what: "target labels",
                    got: l.len(),
                    expected: dks.len(),
                });
            }
        }
        Ok(Self { dks, priors, labels })
    }

    /// Queries for each transition, with g1 priors and dead-reckoned labels.
    pub fn from_transitions(ts: &[TransitionLow], p: &KinematicParams) -> Result<Self, NpError> {
        let priors = ts
            .iter()
            .map(|t| g1_step(&t.state, t.cmd, p, t.dk))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(
            ts.iter().map(|t| t.dk).collect(),
            priors,
            Some(ts.iter().map(|t| t.next).collect()),
        )
    }

    pub fn len(&self) -> usize {
        self.dks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dks.is_empty()
    }
}

/// Residual context: `(omega_R, omega_L, F_x, F_y, M_z)` per element and the
/// low-fidelity decoder mean for that element.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSetRes {
    pub inputs: Vec<[f64; 5]>,
    pub low_means: Vec<[f64; 6]>,
}

impl ContextSetRes {
    pub fn new(inputs: Vec<[f64; 5]>, low_means: Vec<[f64; 6]>) -> Result<Self, NpError> {
        if inputs.is_empty() {
            return Err(NpError::EmptyContext);
        }
        if low_means.len() != inputs.len() {
            return Err(NpError::Misaligned {
                what: "residual context means",
                got: low_means.len(),
                expected: inputs.len(),
            });
        }
        Ok(Self { inputs, low_means })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Wheel rates plus the body forces they produce at the state's body
/// velocity.
pub fn high_inputs(cmd: WheelCmd, state: &RobotState, p: &KinematicParams) -> [f64; 5] {
    let (u, v) = state.body_velocity();
    let f = body_forces(cmd, u, v, p);
    [cmd.right, cmd.left, f.fx, f.fy, f.mz]
}

/// Residual queries: step lengths, approximate residuals `x^{g2} - mu^low`
/// and, when training, true residuals `x^high - mu^low`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSetRes {
    pub dks: Vec<f64>,
    pub approx: Vec<[f64; 6]>,
    pub labels: Option<Vec<[f64; 6]>>,
}

impl TargetSetRes {
    pub fn new(
        dks: Vec<f64>,
        approx: Vec<[f64; 6]>,
        labels: Option<Vec<[f64; 6]>>,
    ) -> Result<Self, NpError> {
        if dks.is_empty() {
            return Err(NpError::EmptyTarget);
        }
        if approx.len() != dks.len() {
            return Err(NpError::Misaligned {
                what: "approximate residuals",
                got: approx.len(),
                expected: dks.len(),
            });
        }
        if let Some(l) = &labels {
            if l.len() != dks.len() {
                return Err(NpError::Misaligned {
                    what: "residual labels",
                    got: l.len(),
                    expected: dks.len(),
                });
            }
        }
        Ok(Self { dks, approx, labels })
    }

    pub fn len(&self) -> usize {
        self.dks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dks.is_empty()
    }
}

/// Per-element post-attention representations and their mean.
#[derive(Clone, Copy, Debug)]
pub struct LowEncoding {
    pub elements: Var,
    pub pooled: Var,
}

/// A latent draw with the posterior it came from.
#[derive(Clone, Copy, Debug)]
pub struct LatentSample {
    pub z: Var,
    pub mu: Var,
    pub var: Var,
}

/// Mean and variance rows (`m x 6`) recorded on a tape, in physical units.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub var: Var,
}

#[derive(Clone, Debug, PartialEq)]
struct Arch {
    low_embed: Mlp,
    sa_query: Linear,
    sa_key: Linear,
    low_latent: Mlp,
    key: Mlp,
    query: Mlp,
    low_dec_dk: Linear,
    low_dec: Mlp,
    res_embed: Mlp,
    res_latent: Mlp,
    res_dec_dk: Linear,
    res_dec: Mlp,
}

impl Arch {
    fn new(c: &NpConfig) -> Self {
        let (h, l, k) = (c.hidden, c.latent, c.key_dim);
        let t = Activation::Tanh;
        Self {
            low_embed: Mlp::new("low/embed", &[8, h, h], t),
            sa_query: Linear::new("low/self_attn/q", h, k),
            sa_key: Linear::new("low/self_attn/k", h, k),
            low_latent: Mlp::new("low/latent", &[h, h, 2 * l], t),
            key: Mlp::new("low/cross_attn/key", &[2, h, k], t),
            query: Mlp::new("low/cross_attn/query", &[1, h, k], t),
            low_dec_dk: Linear::new("low/dec/dk", 1, k),
            low_dec: Mlp::new("low/dec/mlp", &[k + l + h + 6, h, h, 12], t),
            res_embed: Mlp::new("res/embed", &[11, h, h], t),
            res_latent: Mlp::new("res/latent", &[h + l, h, 2 * l], t),
            res_dec_dk: Linear::new("res/dec/dk", 1, k),
            res_dec: Mlp::new("res/dec/mlp", &[k + l + 6, h, h, 12], t),
        }
    }
}

/// Parameters of both neural processes plus the frozen low-decoder copy.
#[derive(Clone, Debug, PartialEq)]
pub struct MfrPinpModel {
    config: NpConfig,
    arch: Arch,
    params: ParameterSet,
    frozen: ParameterSet,
    syncs: u64,
}

fn rows_tensor<const N: usize>(rows: impl Iterator<Item = [f64; N]>) -> Result<Tensor, NpError> {
    let data: Vec<f64> = rows.flatten().collect();
    let n = data.len() / N;
    Ok(Tensor::new(vec![n, N], data)?)
}

fn split_latent(tape: &mut Tape, out: Var, l: usize) -> Result<(Var, Var), NpError> {
    let mu = tape.slice_cols(out, 0, l)?;
    let raw = tape.slice_cols(out, l, l)?;
    let var = softplus_variance(tape, raw)?;
    Ok((mu, var))
}

impl MfrPinpModel {
    pub fn new<R: Rng + ?Sized>(config: NpConfig, rng: &mut R) -> Result<Self, NpError> {
        config.validate()?;
        let arch = Arch::new(&config);
        let mut params = ParameterSet::new();
        arch.low_embed.init(&mut params, rng);
        arch.sa_query.init(&mut params, rng);
        arch.sa_key.init(&mut params, rng);
        arch.low_latent.init(&mut params, rng);
        arch.key.init(&mut params, rng);
        arch.query.init(&mut params, rng);
        arch.low_dec_dk.init(&mut params, rng);
        arch.low_dec.init_zero_head(&mut params, rng);
        arch.res_embed.init(&mut params, rng);
        arch.res_latent.init(&mut params, rng);
        arch.res_dec_dk.init(&mut params, rng);
        arch.res_dec.init_zero_head(&mut params, rng);
        let mut model = Self {
            config,
            arch,
            frozen: ParameterSet::new(),
            params,
            syncs: 0,
        };
        model.sync_frozen();
        model.syncs = 0;
        Ok(model)
    }

    pub fn config(&self) -> &NpConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn frozen_params(&self) -> &ParameterSet {
        &self.frozen
    }

    /// Parameter version the frozen decoder was copied from.
    pub fn frozen_version(&self) -> u64 {
        self.frozen.version()
    }

    pub fn sync_count(&self) -> u64 {
        self.syncs
    }

    /// Copies the live low decoder into the frozen one.
    pub fn sync_frozen(&mut self) {
        self.frozen = self.params.subset(LOW_DECODER_PREFIX);
        self.syncs += 1;
    }

    fn live(&self) -> Bind<'_> {
        Bind::live(&self.params)
    }

    pub fn encode_context_low(
        &self,
        tape: &mut Tape,
        ctx: &ContextSetLow,
    ) -> Result<LowEncoding, NpError> {
        if ctx.is_empty() {
            return Err(NpError::EmptyContext);
        }
        let sc = &self.config.scales;
        let feats = rows_tensor(ctx.cmds.iter().zip(&ctx.states).map(|(c, s)| {
            let st = sc.state_row(&s.wrapped().to_array());
            [
                c.right * sc.command,
                c.left * sc.command,
                st[0],
                st[1],
                st[2],
                st[3],
                st[4],
                st[5],
            ]
        }))?;
        let x = tape.constant(feats)?;
        let h = self.arch.low_embed.forward(tape, self.live(), x)?;
        let q = self.arch.sa_query.forward(tape, self.live(), h)?;
        let k = self.arch.sa_key.forward(tape, self.live(), h)?;
        let scale = 1.0 / (self.config.key_dim as f64).sqrt();
        let att = attend(tape, q, k, h, scale)?;
        let elements = tape.add(h, att)?;
        let pooled = tape.mean_axis(elements, 0)?;
        Ok(LowEncoding { elements, pooled })
    }

    /// Posterior over `z^low` from a pooled representation; samples when
    /// `rng` is given, otherwise returns the mean.
    pub fn latent_low(
        &self,
        tape: &mut Tape,
        pooled: Var,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<LatentSample, NpError> {
        let out = self.arch.low_latent.forward(tape, self.live(), pooled)?;
        self.finish_latent(tape, out, rng)
    }

    fn finish_latent(
        &self,
        tape: &mut Tape,
        out: Var,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<LatentSample, NpError> {
        let (mu, var) = split_latent(tape, out, self.config.latent)?;
        let z = match rng {
            Some(r) => reparameterized_sample(tape, mu, var, r)?,
            None => mu,
        };
        Ok(LatentSample { z, mu, var })
    }

    /// Attends from embedded step lengths over embedded context commands.
    pub fn cross_attention(
        &self,
        tape: &mut Tape,
        ctx: &ContextSetLow,
        values: Var,
        dks: &[f64],
    ) -> Result<Var, NpError> {
        if dks.is_empty() {
            return Err(NpError::EmptyTarget);
        }
        let rows = tape.value(values).rows();
        if rows != ctx.len() {
            return Err(NpError::Misaligned {
                what: "attention values",
                got: rows,
                expected: ctx.len(),
            });
        }
        let sc = &self.config.scales;
        let keys = rows_tensor(ctx.cmds.iter().map(|c| [c.right * sc.command, c.left * sc.command]))?;
        let keys = tape.constant(keys)?;
        let k = self.arch.key.forward(tape, self.live(), keys)?;
        let q = self.dk_column(tape, dks)?;
        let q = self.arch.query.forward(tape, self.live(), q)?;
        let scale = 1.0 / (self.config.key_dim as f64).sqrt();
        Ok(attend(tape, q, k, values, scale)?)
    }

    fn dk_column(&self, tape: &mut Tape, dks: &[f64]) -> Result<Var, NpError> {
        let col = rows_tensor(dks.iter().map(|d| [d * self.config.scales.dk]))?;
        Ok(tape.constant(col)?)
    }

    /// Predicts `x_{k+1}^low` as the g1 prior plus a learned offset. `frozen`
    /// selects the frozen decoder copy, which receives no gradient.
    pub fn decode_low(
        &self,
        tape: &mut Tape,
        target: &TargetSetLow,
        z: Var,
        attention: Var,
        frozen: bool,
    ) -> Result<GaussianVars, NpError> {
        let bind = if frozen {
            Bind::frozen(&self.frozen)
        } else {
            self.live()
        };
        let m = target.len();
        let sc = &self.config.scales;
        let dk = self.dk_column(tape, &target.dks)?;
        let e = self.arch.low_dec_dk.forward(tape, bind, dk)?;
        let e = tape.tanh(e)?;
        let zr = tape.repeat_rows(z, m)?;
        let prior_rows: Vec<[f64; 6]> = target.priors.iter().map(|p| p.to_array()).collect();
        let prior_s = rows_tensor(prior_rows.iter().map(|p| {
            let mut w = *p;
            w[2] = wrap_angle(w[2]);
            sc.state_row(&w)
        }))?;
        let prior_s = tape.constant(prior_s)?;
        let h = tape.concat(&[e, zr, attention, prior_s])?;
        let out = self.arch.low_dec.forward(tape, bind, h)?;
        self.gaussian_head(tape, out, &prior_rows, &sc.low_out)
    }

    fn gaussian_head(
        &self,
        tape: &mut Tape,
        out: Var,
        base: &[[f64; 6]],
        units: &[f64; 6],
    ) -> Result<GaussianVars, NpError> {
        let m = base.len();
        let offset = tape.slice_cols(out, 0, 6)?;
        let raw = tape.slice_cols(out, 6, 6)?;
        let inv = rows_tensor((0..m).map(|_| units.map(|u| 1.0 / u)))?;
        let inv2 = inv.map(|v| v * v);
        let inv = tape.constant(inv)?;
        let inv2 = tape.constant(inv2)?;
        let base = tape.constant(rows_tensor(base.iter().copied())?)?;
        let shift = tape.mul(offset, inv)?;
        let mean = tape.add(base, shift)?;
        let var_units = softplus_variance(tape, raw)?;
        let var = tape.mul(var_units, inv2)?;
        Ok(GaussianVars { mean, var })
    }

    /// Pooled residual-context representation `r_C^high`.
    pub fn encode_context_res(&self, tape: &mut Tape, ctx: &ContextSetRes) -> Result<Var, NpError> {
        if ctx.is_empty() {
            return Err(NpError::EmptyContext);
        }
        let sc = &self.config.scales;
        let feats = rows_tensor(ctx.inputs.iter().zip(&ctx.low_means).map(|(x, mu)| {
            let mut w = *mu;
            w[2] = wrap_angle(w[2]);
            let st = sc.state_row(&w);
            [
                x[0] * sc.command,
                x[1] * sc.command,
                x[2] * sc.force,
                x[3] * sc.force,
                x[4] * sc.force,
                st[0],
                st[1],
                st[2],
                st[3],
                st[4],
                st[5],
            ]
        }))?;
        let x = tape.constant(feats)?;
        let h = self.arch.res_embed.forward(tape, self.live(), x)?;
        Ok(tape.mean_axis(h, 0)?)
    }

    /// Posterior over `z^high` given the residual representation and `z^low`.
    pub fn latent_high(
        &self,
        tape: &mut Tape,
        pooled: Var,
        z_low: Var,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<LatentSample, NpError> {
        let input = tape.concat(&[pooled, z_low])?;
        let out = self.arch.res_latent.forward(tape, self.live(), input)?;
        self.finish_latent(tape, out, rng)
    }

    /// Predicts the residual as `r_hat` plus a learned offset.
    pub fn decode_res(
        &self,
        tape: &mut Tape,
        target: &TargetSetRes,
        z_high: Var,
    ) -> Result<GaussianVars, NpError> {
        let m = target.len();
        let sc = &self.config.scales;
        let dk = self.dk_column(tape, &target.dks)?;
        let e = self.arch.res_dec_dk.forward(tape, self.live(), dk)?;
        let e = tape.tanh(e)?;
        let zr = tape.repeat_rows(z_high, m)?;
        let approx_s = rows_tensor(target.approx.iter().map(|r| sc.state_row(r)))?;
        let approx_s = tape.constant(approx_s)?;
        let h = tape.concat(&[e, zr, approx_s])?;
        let out = self.arch.res_dec.forward(tape, self.live(), h)?;
        self.gaussian_head(tape, out, &target.approx, &sc.res_out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_params(&self.params);
        for (k, v) in self.frozen.iter() {
            ck.tensors.push((format!("{FROZEN_PREFIX}{k}"), v.clone()));
        }
        ck.stamps.push((String::from("frozen_version"), self.frozen.version()));
        ck.stamps.push((String::from("syncs"), self.syncs));
        ck
    }

    /// Restores parameters saved by [`Self::to_checkpoint`] into a model with
    /// the given configuration.
    pub fn from_checkpoint(config: NpConfig, ck: &Checkpoint) -> Result<Self, NpError> {
        config.validate()?;
        let arch = Arch::new(&config);
        let mut params = ParameterSet::new();
        let mut frozen = ParameterSet::new();
        for (k, v) in &ck.tensors {
            match k.strip_prefix(FROZEN_PREFIX) {
                Some(rest) => frozen.insert(rest, v.clone()),
                None => params.insert(k.clone(), v.clone()),
            };
        }
        params.set_version(ck.param_version);
        let missing = |what: &str| NpError::Checkpoint(format!("missing stamp `{what}`"));
        frozen.set_version(ck.stamp("frozen_version").ok_or_else(|| missing("frozen_version"))?);
        let syncs = ck.stamp("syncs").ok_or_else(|| missing("syncs"))?;
        let expected = {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
            Self::new(config, &mut rng)?
        };
        for (name, t) in expected.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| NpError::Checkpoint(format!("missing tensor `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(NpError::Checkpoint(format!("tensor `{name}` has wrong shape")));
            }
            if name.starts_with(LOW_DECODER_PREFIX) && !frozen.contains(name) {
                return Err(NpError::Checkpoint(format!("missing frozen tensor `{name}`")));
            }
        }
        if params.len() != expected.params.len() {
            return Err(NpError::Checkpoint(String::from("unexpected tensors")));
        }
        Ok(Self {
            config,
            arch,
            params,
            frozen,
            syncs,
        })
    }
}

/// What the estimator is asked at each step: the new wheel reading and step,
/// the dead-reckoned state it applies to, and the g2 one-step prediction from
/// the latest high-fidelity label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceQuery {
    pub cmd: WheelCmd,
    pub dk: f64,
    pub state_low: RobotState,
    pub g2_next: RobotState,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Inference {
    pub low: GaussianPrediction,
    pub res: GaussianPrediction,
    /// `low` and `res` fused, heading wrapped, before calibration.
    pub fused: GaussianPrediction,
    /// `fused` with each standard deviation multiplied by its quantile.
    pub calibrated: GaussianPrediction,
    /// Set when the physics fallback produced the estimate.
    pub fallback: bool,
}

fn reborrow<'a>(r: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match r {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

fn row(t: &Tensor, r: usize) -> [f64; 6] {
    let mut a = [0.0; 6];
    a.copy_from_slice(t.row_slice(r));
    a
}

fn scale_std(p: &GaussianPrediction, q: &[f64; 6]) -> GaussianPrediction {
    let mut out = *p;
    for i in 0..6 {
        out.var[i] *= q[i] * q[i];
    }
    out
}

/// One estimation step for `x_{k+1}^high`. `window` holds the most recent
/// low-fidelity transitions (only the last `context_window` are used).
/// Latent means are used unless sampling is configured and `rng` is given.
pub fn infer_step(
    model: &MfrPinpModel,
    window: &[TransitionLow],
    query: &InferenceQuery,
    params: &KinematicParams,
    quantile: &[f64; 6],
    rng: Option<&mut dyn RngCore>,
) -> Result<Inference, NpError> {
    let cfg = model.config();
    let prior = g1_step(&query.state_low, query.cmd, params, query.dk)?;
    let ctx = &window[window.len().saturating_sub(cfg.context_window)..];
    if ctx.len() < cfg.min_context {
        let var = cfg.fallback_std.map(|s| s * s);
        let fused = GaussianPrediction::new(prior.to_array(), var)?;
        let zero = GaussianPrediction::new([0.0; 6], [f64::MIN_POSITIVE; 6])?;
        return Ok(Inference {
            low: fused,
            res: zero,
            fused,
            calibrated: scale_std(&fused, quantile),
            fallback: true,
        });
    }
    let mut rng = if cfg.deterministic { None } else { rng };

    let mut tape = Tape::new();
    let ctx_low = ContextSetLow::from_transitions(ctx)?;
    // context elements first, the live query last
    let mut dks: Vec<f64> = ctx.iter().map(|t| t.dk).collect();
    dks.push(query.dk);
    let mut priors = ctx
        .iter()
        .map(|t| g1_step(&t.state, t.cmd, params, t.dk))
        .collect::<Result<Vec<_>, _>>()?;
    priors.push(prior);
    let targets = TargetSetLow::new(dks, priors, None)?;

    let enc = model.encode_context_low(&mut tape, &ctx_low)?;
    let z_low = model.latent_low(&mut tape, enc.pooled, reborrow(&mut rng))?;
    let a = model.cross_attention(&mut tape, &ctx_low, enc.elements, &targets.dks)?;
    let low = model.decode_low(&mut tape, &targets, z_low.z, a, false)?;
    let (low_mean, low_var) = (tape.value(low.mean).clone(), tape.value(low.var).clone());
    let n = ctx.len();

    let ctx_res = ContextSetRes::new(
        ctx.iter().map(|t| high_inputs(t.cmd, &t.state, params)).collect(),
        (0..n).map(|r| row(&low_mean, r)).collect(),
    )?;
    let mu_low = row(&low_mean, n);
    let approx = state_difference(&query.g2_next.to_array(), &mu_low);
    let target_res = TargetSetRes::new(vec![query.dk], vec![approx], None)?;
    let r_c = model.encode_context_res(&mut tape, &ctx_res)?;
    let z_high = model.latent_high(&mut tape, r_c, z_low.z, reborrow(&mut rng))?;
    let res = model.decode_res(&mut tape, &target_res, z_high.z)?;

    let low = GaussianPrediction::new(mu_low, row(&low_var, n))?;
    let res = GaussianPrediction::new(row(tape.value(res.mean), 0), row(tape.value(res.var), 0))?;
    let mut fused = fuse(&low, &res);
    fused.mean[RobotState::HEADING] = wrap_angle(fused.mean[RobotState::HEADING]);
    Ok(Inference {
        low,
        res,
        fused,
        calibrated: scale_std(&fused, quantile),
        fallback: false,
    })
}
