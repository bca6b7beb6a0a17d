//! Replay buffers, the dual ELBO and the hybrid train / infer / update loop.

use alloc::collections::VecDeque;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent f64 math shadows it when std is linked
use num_traits::Float;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    adam_step, diag_gaussian_kl, gaussian_nll, AdamState, AutodiffError, StepStatus, Tape, Tensor,
    Var, DEFAULT_LEARNING_RATE, DEFAULT_WEIGHT_DECAY,
};
use crate::conformal::{
    fit_quantile, score, CalibrationSet, ConformalConfig, ConformalError, QuantileVector,
};
use crate::metrics::align_heading;
use crate::np::{
    high_inputs, infer_step, state_difference, ContextSetLow, ContextSetRes, GaussianPrediction,
    InferenceQuery, LatentSample, LowEncoding, MfrPinpModel, NpConfig, NpError, TargetSetLow,
    TargetSetRes,
};
use crate::physics::{g1_step, g2_step, DynState, KinematicParams, PhysicsError, RobotState, WheelCmd};
use crate::sim::{builtin_profile, dead_reckon, simulate, SensorFrame, SimError, SimSpec};
use crate::ukf::{run_fusion, UkfConfig, UkfError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LearnerError {
    #[error(transparent)]
    Np(#[from] NpError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Ukf(#[from] UkfError),
    #[error("window of {0} transitions has no context/target split")]
    DegenerateBatch(usize),
    #[error("invalid training configuration: {0}")]
    BadConfig(&'static str),
    #[error("scenario has {frames} frames but {labels} labels")]
    Misaligned { frames: usize, labels: usize },
}

/// One low-fidelity step: the wheel reading applied at dead-reckoned state
/// `state` for `dk` seconds, reaching `next`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionLow {
    pub cmd: WheelCmd,
    pub state: RobotState,
    pub dk: f64,
    pub next: RobotState,
    /// Transitions with different episodes never share a window.
    pub episode: u32,
}

/// One high-fidelity step, paired with the low-fidelity step over the same
/// interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionHigh {
    pub low: TransitionLow,
    /// `(omega_R, omega_L, F_x, F_y, M_z)`.
    pub inputs: [f64; 5],
    /// Fused label `x_{k+1}^high`.
    pub next_high: RobotState,
    /// `x_{k+1}^{g2}`.
    pub g2: RobotState,
}

/// Bounded FIFO store; pushing into a full buffer evicts the oldest item.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: VecDeque<T>,
    inserted: u64,
}

impl<T: Clone> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self, LearnerError> {
        if capacity == 0 {
            return Err(LearnerError::BadConfig("buffer capacity must be positive"));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            inserted: 0,
        })
    }

    /// Appends `item`, returning the evicted oldest item when full.
    pub fn push(&mut self, item: T) -> Option<T> {
        let evicted = if self.items.len() == self.capacity {
            self.items.pop_front()
        } else {
            None
        };
        self.items.push_back(item);
        self.inserted += 1;
        evicted
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total pushes over the buffer's lifetime.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    /// A random run of `len` consecutive items accepted by `same_run` on its
    /// first and last elements; `None` after a bounded number of misses.
    pub fn sample_window<R: Rng + ?Sized>(
        &self,
        len: usize,
        rng: &mut R,
        same_run: impl Fn(&T, &T) -> bool,
    ) -> Option<Vec<T>> {
        if len == 0 || self.items.len() < len {
            return None;
        }
        for _ in 0..32 {
            let start = rng.random_range(0..=self.items.len() - len);
            if same_run(&self.items[start], &self.items[start + len - 1]) {
                return Some(self.items.range(start..start + len).cloned().collect());
            }
        }
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    /// Windows per training batch; the batch holds `windows * window_len`
    /// transitions of each fidelity.
    pub windows: usize,
    pub window_len: usize,
    pub low_capacity: usize,
    pub high_capacity: usize,
    /// Iterations between training phases; `None` disables training.
    pub train_period: Option<usize>,
    /// Training phases between frozen-decoder syncs.
    pub sync_period: usize,
    /// A high-fidelity transition is stored every this many iterations.
    pub high_every: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Low-fidelity transitions simulated to pre-fill the buffers.
    pub warmup: usize,
    /// Iterations before a high-fidelity label becomes available.
    pub label_delay: usize,
    pub seed: u64,
    /// Iterations between checkpoints; `None` disables them.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            windows: 8,
            window_len: 16,
            low_capacity: 10_000,
            high_capacity: 10_000,
            train_period: Some(10),
            sync_period: 100,
            high_every: 5,
            lr: DEFAULT_LEARNING_RATE,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            warmup: 1000,
            label_delay: 0,
            seed: 0,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        if self.windows == 0 || self.window_len < 2 {
            return Err(LearnerError::BadConfig("need at least one window of two transitions"));
        }
        if self.low_capacity == 0 || self.high_capacity == 0 {
            return Err(LearnerError::BadConfig("buffer capacity must be positive"));
        }
        if self.train_period == Some(0) || self.checkpoint_every == Some(0) {
            return Err(LearnerError::BadConfig("periods must be positive"));
        }
        if self.sync_period == 0 || self.high_every == 0 {
            return Err(LearnerError::BadConfig("periods must be positive"));
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0) {
            return Err(LearnerError::BadConfig("lr must be positive, weight_decay non-negative"));
        }
        Ok(())
    }
}

/// Recorded pieces of the low-fidelity ELBO for one window.
#[derive(Clone, Debug)]
pub struct LowTerms {
    /// `recon + kl / n`, the negated per-target ELBO.
    pub loss: Var,
    pub recon: Var,
    pub kl: Var,
    /// `z^low` drawn from the target-conditioned posterior.
    pub z: LatentSample,
    pub context: ContextSetLow,
    pub encoding: LowEncoding,
}

#[derive(Clone, Copy, Debug)]
pub struct ResTerms {
    pub loss: Var,
    pub recon: Var,
    pub kl: Var,
}

fn split(window_len: usize) -> Result<usize, LearnerError> {
    if window_len < 2 {
        Err(LearnerError::DegenerateBatch(window_len))
    } else {
        Ok(window_len - 1)
    }
}

fn label_rows(rows: &[[f64; 6]]) -> Result<Tensor, AutodiffError> {
    Tensor::new(
        alloc::vec![rows.len(), 6],
        rows.iter().flatten().copied().collect(),
    )
}

/// Negated low-fidelity ELBO for one window: every transition but the last
/// is context, the whole window is the target set.
pub fn elbo_low(
    model: &MfrPinpModel,
    tape: &mut Tape,
    window: &[TransitionLow],
    params: &KinematicParams,
    rng: Option<&mut dyn RngCore>,
) -> Result<LowTerms, LearnerError> {
    let n_ctx = split(window.len())?;
    elbo_low_sets(model, tape, &window[..n_ctx], window, params, rng)
}

/// [`elbo_low`] with explicit context and target transitions.
pub fn elbo_low_sets(
    model: &MfrPinpModel,
    tape: &mut Tape,
    context: &[TransitionLow],
    target: &[TransitionLow],
    params: &KinematicParams,
    rng: Option<&mut dyn RngCore>,
) -> Result<LowTerms, LearnerError> {
    let ctx = ContextSetLow::from_transitions(context)?;
    let full = ContextSetLow::from_transitions(target)?;
    let targets = TargetSetLow::from_transitions(target, params)?;
    let enc_c = model.encode_context_low(tape, &ctx)?;
    let enc_t = model.encode_context_low(tape, &full)?;
    let q_t = model.latent_low(tape, enc_t.pooled, rng)?;
    let q_c = model.latent_low(tape, enc_c.pooled, None)?;
    let a = model.cross_attention(tape, &ctx, enc_c.elements, &targets.dks)?;
    let pred = model.decode_low(tape, &targets, q_t.z, a, false)?;

    let labels: Vec<[f64; 6]> = targets
        .labels
        .as_ref()
        .expect("labelled targets")
        .iter()
        .zip(&targets.priors)
        .map(|(y, p)| align_heading(&y.to_array(), &p.to_array()))
        .collect();
    let y = tape.constant(label_rows(&labels)?)?;
    let recon = gaussian_nll(tape, y, pred.mean, pred.var)?;
    let kl = diag_gaussian_kl(tape, q_t.mu, q_t.var, q_c.mu, q_c.var)?;
    let kl_per = tape.scale(kl, 1.0 / target.len() as f64)?;
    let loss = tape.add(recon, kl_per)?;
    Ok(LowTerms {
        loss,
        recon,
        kl,
        z: q_t,
        context: ctx,
        encoding: enc_c,
    })
}

/// Frozen-decoder means `mu^low(F)` for the low transitions of `window`,
/// conditioned on the low context and latent in `low`. Values only; no
/// gradient reaches any parameter.
pub fn frozen_low_means(
    model: &MfrPinpModel,
    tape: &mut Tape,
    window: &[TransitionHigh],
    low: &LowTerms,
    params: &KinematicParams,
) -> Result<Vec<[f64; 6]>, LearnerError> {
    let lows: Vec<TransitionLow> = window.iter().map(|h| h.low).collect();
    let targets = TargetSetLow::from_transitions(&lows, params)?;
    let z = tape.detach(low.z.z)?;
    let values = tape.detach(low.encoding.elements)?;
    let a = model.cross_attention(tape, &low.context, values, &targets.dks)?;
    let a = tape.detach(a)?;
    let pred = model.decode_low(tape, &targets, z, a, true)?;
    let m = tape.value(pred.mean);
    Ok((0..m.rows())
        .map(|r| {
            let mut a = [0.0; 6];
            a.copy_from_slice(m.row_slice(r));
            a
        })
        .collect())
}

/// Negated residual ELBO for one window of high-fidelity transitions, with
/// labels `r = x^high - mu^low(F)` and `r_hat = x^{g2} - mu^low(F)`.
pub fn elbo_res(
    model: &MfrPinpModel,
    tape: &mut Tape,
    window: &[TransitionHigh],
    frozen_means: &[[f64; 6]],
    z_low: Var,
    rng: Option<&mut dyn RngCore>,
) -> Result<ResTerms, LearnerError> {
    let n_ctx = split(window.len())?;
    if frozen_means.len() != window.len() {
        return Err(NpError::Misaligned {
            what: "frozen means",
            got: frozen_means.len(),
            expected: window.len(),
        }
        .into());
    }
    let approx: Vec<[f64; 6]> = window
        .iter()
        .zip(frozen_means)
        .map(|(h, mu)| state_difference(&h.g2.to_array(), mu))
        .collect();
    let labels: Vec<[f64; 6]> = window
        .iter()
        .zip(frozen_means)
        .zip(&approx)
        .map(|((h, mu), r_hat)| align_heading(&state_difference(&h.next_high.to_array(), mu), r_hat))
        .collect();
    let inputs: Vec<[f64; 5]> = window.iter().map(|h| h.inputs).collect();
    let ctx = ContextSetRes::new(inputs[..n_ctx].to_vec(), frozen_means[..n_ctx].to_vec())?;
    let full = ContextSetRes::new(inputs, frozen_means.to_vec())?;
    let targets = TargetSetRes::new(
        window.iter().map(|h| h.low.dk).collect(),
        approx,
        Some(labels.clone()),
    )?;

    let r_c = model.encode_context_res(tape, &ctx)?;
    let r_t = model.encode_context_res(tape, &full)?;
    let q_t = model.latent_high(tape, r_t, z_low, rng)?;
    let q_c = model.latent_high(tape, r_c, z_low, None)?;
    let pred = model.decode_res(tape, &targets, q_t.z)?;
    let y = tape.constant(label_rows(&labels)?)?;
    let recon = gaussian_nll(tape, y, pred.mean, pred.var)?;
    let kl = diag_gaussian_kl(tape, q_t.mu, q_t.var, q_c.mu, q_c.var)?;
    let kl_per = tape.scale(kl, 1.0 / window.len() as f64)?;
    let loss = tape.add(recon, kl_per)?;
    Ok(ResTerms { loss, recon, kl })
}

/// Joint loss `-(L^low + L^R)` averaged over windows, recorded on `tape`.
pub fn joint_loss(
    model: &MfrPinpModel,
    tape: &mut Tape,
    batch: &[(Vec<TransitionLow>, Vec<TransitionHigh>)],
    params: &KinematicParams,
    rng: &mut dyn RngCore,
) -> Result<(Var, LossRecord), LearnerError> {
    let mut total: Option<Var> = None;
    let mut rec = LossRecord::default();
    let w = batch.len() as f64;
    for (low_w, high_w) in batch {
        let low = elbo_low(model, tape, low_w, params, Some(&mut *rng))?;
        let means = frozen_low_means(model, tape, high_w, &low, params)?;
        let res = elbo_res(model, tape, high_w, &means, low.z.z, Some(&mut *rng))?;
        let both = tape.add(low.loss, res.loss)?;
        total = Some(match total {
            Some(t) => tape.add(t, both)?,
            None => both,
        });
        rec.elbo_low -= tape.value(low.loss).item() / w;
        rec.elbo_res -= tape.value(res.loss).item() / w;
        rec.kl_low += tape.value(low.kl).item() / w;
        rec.kl_res += tape.value(res.kl).item() / w;
    }
    let total = total.ok_or(LearnerError::BadConfig("empty batch"))?;
    let loss = tape.scale(total, 1.0 / w)?;
    rec.loss = tape.value(loss).item();
    Ok((loss, rec))
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossRecord {
    /// Iteration of the online loop that triggered the phase.
    pub iter: usize,
    pub elbo_low: f64,
    pub elbo_res: f64,
    pub kl_low: f64,
    pub kl_res: f64,
    /// `-(elbo_low + elbo_res)`.
    pub loss: f64,
    pub applied: bool,
}

fn same_episode_low(a: &TransitionLow, b: &TransitionLow) -> bool {
    a.episode == b.episode
}

fn same_episode_high(a: &TransitionHigh, b: &TransitionHigh) -> bool {
    a.low.episode == b.low.episode
}

/// Draws the windows of one training batch; `None` when either buffer
/// cannot supply them.
pub fn sample_batch<R: Rng + ?Sized>(
    low: &ReplayBuffer<TransitionLow>,
    high: &ReplayBuffer<TransitionHigh>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Option<Vec<(Vec<TransitionLow>, Vec<TransitionHigh>)>> {
    (0..cfg.windows)
        .map(|_| {
            let l = low.sample_window(cfg.window_len, rng, same_episode_low)?;
            let h = high.sample_window(cfg.window_len, rng, same_episode_high)?;
            Some((l, h))
        })
        .collect()
}

/// One training phase: sample a batch, one Adam step on the joint loss.
/// Returns `None` when the buffers are too small.
#[allow(clippy::too_many_arguments)]
pub fn train_phase(
    model: &mut MfrPinpModel,
    adam: &mut AdamState,
    low: &ReplayBuffer<TransitionLow>,
    high: &ReplayBuffer<TransitionHigh>,
    cfg: &TrainConfig,
    params: &KinematicParams,
    rng: &mut ChaCha8Rng,
    iter: usize,
) -> Result<Option<LossRecord>, LearnerError> {
    let Some(batch) = sample_batch(low, high, cfg, rng) else {
        return Ok(None);
    };
    let mut tape = Tape::new();
    let (loss, mut rec) = joint_loss(model, &mut tape, &batch, params, rng)?;
    let grads = tape.backward(loss)?;
    let grads = tape.param_grads(&grads, model.params());
    let status = adam_step(model.params_mut(), &grads, adam)?;
    rec.iter = iter;
    rec.applied = status == StepStatus::Applied;
    Ok(Some(rec))
}

/// Sensor stream, fused labels and the pose the run starts from.
#[derive(Clone, Copy, Debug)]
pub struct Scenario<'a> {
    pub frames: &'a [SensorFrame],
    pub labels: &'a [RobotState],
    pub initial: RobotState,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LoopConfig {
    pub np: NpConfig,
    pub train: TrainConfig,
    pub conformal: ConformalConfig,
    pub params: KinematicParams,
    pub ukf: UkfConfig,
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        self.np.validate()?;
        self.train.validate()?;
        self.conformal.validate()?;
        self.params.validate()?;
        self.ukf.validate()?;
        Ok(())
    }
}

/// One row of the prediction log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionRecord {
    pub iter: usize,
    pub t: f64,
    /// Fused prediction before calibration.
    pub raw: GaussianPrediction,
    pub calibrated: GaussianPrediction,
    pub quantile: [f64; 6],
    pub fallback: bool,
    /// Fused label for the same time, heading aligned to `raw`.
    pub label: [f64; 6],
    /// Dead-reckoned state for the same time, heading aligned to the label.
    pub dead_reckoning: [f64; 6],
}

/// Hooks for the caller: a clock for latency and checkpoint delivery.
pub trait RunObserver {
    /// Milliseconds on any monotonic clock; the default reports zero.
    fn now_ms(&mut self) -> f64 {
        0.0
    }

    fn on_prediction(&mut self, _rec: &PredictionRecord, _latency_ms: f64) {}

    fn on_checkpoint(&mut self, _iter: usize, _model: &MfrPinpModel) {}

    fn on_error(&mut self, _iter: usize, _err: &LearnerError) {}
}

/// Observer that ignores everything.
pub struct NoObserver;

impl RunObserver for NoObserver {}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub predictions: Vec<PredictionRecord>,
    pub losses: Vec<LossRecord>,
    pub quantiles: Vec<QuantileVector>,
    /// Iterations skipped with the error that caused it.
    pub errors: Vec<(usize, String)>,
    pub model: MfrPinpModel,
    pub low_inserted: u64,
    pub high_inserted: u64,
}

/// Stream `k` of the generator for a run seed: 0 initializes weights, 1
/// drives training, 2 inference.
pub fn stream_rng(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

/// Transitions from a seeded random-teleop rollout used to pre-fill the
/// buffers before the live stream starts.
pub fn warmup_transitions(
    cfg: &LoopConfig,
    seed: u64,
) -> Result<(Vec<TransitionLow>, Vec<TransitionHigh>), LearnerError> {
    let n = cfg.train.warmup;
    if n == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let profile = builtin_profile("random-teleop", seed)?;
    let spec = SimSpec {
        params: cfg.params,
        frames: n,
        ..SimSpec::default()
    };
    let data = simulate(&profile, &spec, seed)?;
    let initial = RobotState::default();
    let labels = run_fusion(&data.sensors, &cfg.ukf, &cfg.params, initial)?;
    let scenario = Scenario {
        frames: &data.sensors,
        labels: &labels,
        initial,
    };
    stream_transitions(&scenario, cfg, 0)
}

/// All low transitions of a scenario and the high transitions at the
/// configured rate, without any model in the loop.
pub fn stream_transitions(
    s: &Scenario<'_>,
    cfg: &LoopConfig,
    episode: u32,
) -> Result<(Vec<TransitionLow>, Vec<TransitionHigh>), LearnerError> {
    let dr = dead_reckon(s.frames, &cfg.params, s.initial)?;
    let mut lows = Vec::with_capacity(s.frames.len());
    let mut highs = Vec::new();
    for (i, f) in s.frames.iter().enumerate() {
        let prev = if i == 0 { s.initial } else { dr[i - 1] };
        let low = TransitionLow {
            cmd: f.encoder,
            state: prev,
            dk: f.dk,
            next: dr[i],
            episode,
        };
        lows.push(low);
        if i % cfg.train.high_every == 0 {
            let g2 = g2_prediction(s, i, 0, &cfg.params)?;
            highs.push(TransitionHigh {
                low,
                inputs: high_inputs(f.encoder, &prev, &cfg.params),
                next_high: s.labels[i],
                g2,
            });
        }
    }
    Ok((lows, highs))
}

/// `x_{i}^{g2}`: the newest label available at iteration `i` (frame
/// `i - 1 - delay`, or the initial state) rolled forward through the
/// encoder readings up to frame `i`.
pub fn g2_prediction(
    s: &Scenario<'_>,
    i: usize,
    delay: usize,
    p: &KinematicParams,
) -> Result<RobotState, LearnerError> {
    let (mut x, from) = match i.checked_sub(1 + delay) {
        Some(src) => (DynState::from_robot(&s.labels[src]), src + 1),
        None => (DynState::from_robot(&s.initial), 0),
    };
    for f in &s.frames[from..=i] {
        x = g2_step(&x, f.encoder, p, f.dk)?;
    }
    Ok(x.to_robot())
}

/// The training side of the online loop. The loop hands it every
/// transition as it becomes available and gives it a chance to update the
/// inference model after each iteration.
pub trait Learner {
    fn push_low(&mut self, t: TransitionLow);

    fn push_high(&mut self, t: TransitionHigh);

    /// Called once per iteration after the pushes; may update `model` in
    /// place and append training records to `losses`.
    fn after_iteration(
        &mut self,
        iter: usize,
        model: &mut MfrPinpModel,
        losses: &mut Vec<LossRecord>,
    ) -> Result<(), LearnerError>;

    /// Low and high transitions inserted so far.
    fn inserted(&self) -> (u64, u64);
}

/// Trains on the inference model itself, one phase every `train_period`
/// iterations.
pub struct InlineLearner {
    cfg: TrainConfig,
    params: KinematicParams,
    adam: AdamState,
    low: ReplayBuffer<TransitionLow>,
    high: ReplayBuffer<TransitionHigh>,
    rng: ChaCha8Rng,
    applied: usize,
}

impl InlineLearner {
    pub fn new(cfg: &LoopConfig) -> Result<Self, LearnerError> {
        let tc = cfg.train;
        Ok(Self {
            cfg: tc,
            params: cfg.params,
            adam: AdamState::new(tc.lr, tc.weight_decay),
            low: ReplayBuffer::new(tc.low_capacity)?,
            high: ReplayBuffer::new(tc.high_capacity)?,
            rng: stream_rng(tc.seed, 1),
            applied: 0,
        })
    }

    /// One phase on `model`; `None` when the buffers are still too small.
    pub fn train(&mut self, model: &mut MfrPinpModel, iter: usize) -> Result<Option<LossRecord>, LearnerError> {
        let rec = train_phase(
            model,
            &mut self.adam,
            &self.low,
            &self.high,
            &self.cfg,
            &self.params,
            &mut self.rng,
            iter,
        )?;
        if let Some(r) = &rec {
            if r.applied {
                self.applied += 1;
                if self.applied % self.cfg.sync_period == 0 {
                    model.sync_frozen();
                }
            }
        }
        Ok(rec)
    }
}

impl Learner for InlineLearner {
    fn push_low(&mut self, t: TransitionLow) {
        self.low.push(t);
    }

    fn push_high(&mut self, t: TransitionHigh) {
        self.high.push(t);
    }

    fn after_iteration(
        &mut self,
        iter: usize,
        model: &mut MfrPinpModel,
        losses: &mut Vec<LossRecord>,
    ) -> Result<(), LearnerError> {
        if let Some(period) = self.cfg.train_period {
            if (iter + 1) % period == 0 {
                if let Some(rec) = self.train(model, iter)? {
                    losses.push(rec);
                }
            }
        }
        Ok(())
    }

    fn inserted(&self) -> (u64, u64) {
        (self.low.inserted(), self.high.inserted())
    }
}

struct LoopState {
    model: MfrPinpModel,
    window: VecDeque<TransitionLow>,
    lows: Vec<TransitionLow>,
    g2s: Vec<RobotState>,
    raw: Vec<Option<GaussianPrediction>>,
    cal: CalibrationSet,
    q: QuantileVector,
}

/// The online loop: per iteration infer, store, score; periodically train,
/// sync the frozen decoder and refit the conformal quantiles.
pub fn run_loop(
    scenario: &Scenario<'_>,
    cfg: &LoopConfig,
    observer: &mut dyn RunObserver,
) -> Result<RunOutput, LearnerError> {
    run_loop_from(scenario, cfg, initial_model(cfg)?, observer)
}

/// The freshly initialized model a run with `cfg` starts from.
pub fn initial_model(cfg: &LoopConfig) -> Result<MfrPinpModel, LearnerError> {
    Ok(MfrPinpModel::new(cfg.np, &mut stream_rng(cfg.train.seed, 0))?)
}

/// [`run_loop`] starting from an existing model.
pub fn run_loop_from(
    scenario: &Scenario<'_>,
    cfg: &LoopConfig,
    model: MfrPinpModel,
    observer: &mut dyn RunObserver,
) -> Result<RunOutput, LearnerError> {
    cfg.validate()?;
    run_loop_with(scenario, cfg, model, &mut InlineLearner::new(cfg)?, observer)
}

/// The online loop with training delegated to `learner`. Warmup
/// transitions are pushed to it before the first frame.
pub fn run_loop_with(
    scenario: &Scenario<'_>,
    cfg: &LoopConfig,
    model: MfrPinpModel,
    learner: &mut dyn Learner,
    observer: &mut dyn RunObserver,
) -> Result<RunOutput, LearnerError> {
    cfg.validate()?;
    let n = scenario.frames.len();
    if scenario.labels.len() != n {
        return Err(LearnerError::Misaligned {
            frames: n,
            labels: scenario.labels.len(),
        });
    }
    let tc = &cfg.train;
    let mut infer_rng = stream_rng(tc.seed, 2);

    let mut st = LoopState {
        model,
        window: VecDeque::with_capacity(cfg.np.context_window + 1),
        lows: Vec::with_capacity(n),
        g2s: Vec::with_capacity(n),
        raw: Vec::with_capacity(n),
        cal: CalibrationSet::new(cfg.conformal.alpha, cfg.conformal.window)?,
        q: QuantileVector::unit(),
    };
    let (wl, wh) = warmup_transitions(cfg, tc.seed.wrapping_add(0x5eed))?;
    for t in wl {
        learner.push_low(t);
    }
    for t in wh {
        learner.push_high(t);
    }

    let mut out = RunOutput {
        predictions: Vec::with_capacity(n),
        losses: Vec::new(),
        quantiles: Vec::new(),
        errors: Vec::new(),
        model: st.model.clone(),
        low_inserted: 0,
        high_inserted: 0,
    };
    let mut x_low = scenario.initial;
    for i in 0..n {
        match iteration(scenario, cfg, &mut st, learner, &mut x_low, i, &mut infer_rng, observer, &mut out) {
            Ok(()) => {}
            Err(e) => {
                observer.on_error(i, &e);
                out.errors.push((i, e.to_string()));
            }
        }
    }
    (out.low_inserted, out.high_inserted) = learner.inserted();
    out.model = st.model;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn iteration(
    s: &Scenario<'_>,
    cfg: &LoopConfig,
    st: &mut LoopState,
    learner: &mut dyn Learner,
    x_low: &mut RobotState,
    i: usize,
    infer_rng: &mut ChaCha8Rng,
    observer: &mut dyn RunObserver,
    out: &mut RunOutput,
) -> Result<(), LearnerError> {
    let tc = &cfg.train;
    let p = &cfg.params;
    let f = &s.frames[i];
    let prev = *x_low;
    let next = g1_step(&prev, f.encoder, p, f.dk)?;
    *x_low = next;
    let low = TransitionLow {
        cmd: f.encoder,
        state: prev,
        dk: f.dk,
        next,
        episode: 1,
    };
    st.lows.push(low);
    let g2_next = g2_prediction(s, i, tc.label_delay, p)?;
    st.g2s.push(g2_next);

    let query = InferenceQuery {
        cmd: f.encoder,
        dk: f.dk,
        state_low: prev,
        g2_next,
    };
    let window = st.window.make_contiguous();
    let t0 = observer.now_ms();
    let inferred = infer_step(&st.model, window, &query, p, &st.q.q, Some(infer_rng as &mut dyn RngCore));
    let latency = observer.now_ms() - t0;

    st.window.push_back(low);
    if st.window.len() > cfg.np.context_window {
        st.window.pop_front();
    }
    learner.push_low(low);

    let inferred = match inferred {
        Ok(inf) if inf.fused.is_finite() => Some(inf),
        Ok(_) => None,
        Err(e) => {
            st.raw.push(None);
            return Err(e.into());
        }
    };
    st.raw.push(inferred.map(|inf| inf.fused));
    if let Some(inf) = inferred {
        let label = align_heading(&s.labels[i].to_array(), &inf.fused.mean);
        let rec = PredictionRecord {
            iter: i,
            t: f.t,
            raw: inf.fused,
            calibrated: inf.calibrated,
            quantile: st.q.q,
            fallback: inf.fallback,
            label,
            dead_reckoning: align_heading(&next.to_array(), &label),
        };
        observer.on_prediction(&rec, latency);
        out.predictions.push(rec);
    }

    // labels for frame j = i - delay arrive now
    if let Some(j) = i.checked_sub(tc.label_delay) {
        if let Some(pred) = st.raw[j] {
            let y = align_heading(&s.labels[j].to_array(), &pred.mean);
            st.cal.push(score(&y, &pred)?)?;
        }
        if j % tc.high_every == 0 {
            let lj = st.lows[j];
            learner.push_high(TransitionHigh {
                low: lj,
                inputs: high_inputs(lj.cmd, &lj.state, p),
                next_high: s.labels[j],
                g2: st.g2s[j],
            });
        }
    }

    learner.after_iteration(i, &mut st.model, &mut out.losses)?;

    if (i + 1) % cfg.conformal.refit_period == 0 {
        match fit_quantile(&st.cal, cfg.conformal.min_scores, i as u64) {
            Ok(q) => {
                st.q = q;
                out.quantiles.push(q);
            }
            Err(ConformalError::Insufficient { .. }) => {}
            Err(e) => return Err(e.into()),
        }
    }

    if let Some(every) = tc.checkpoint_every {
        if (i + 1) % every == 0 {
            observer.on_checkpoint(i, &st.model);
        }
    }
    Ok(())
}

/// Dead-reckoning predictions of a scenario in the prediction-log shape,
/// with a constant standard deviation.
pub fn baseline_predictions(
    s: &Scenario<'_>,
    p: &KinematicParams,
    std: &[f64; 6],
) -> Result<Vec<PredictionRecord>, LearnerError> {
    let dr = dead_reckon(s.frames, p, s.initial)?;
    let var = std.map(|v| v * v);
    dr.iter()
        .zip(s.frames)
        .zip(s.labels)
        .enumerate()
        .map(|(i, ((x, f), y))| {
            let pred = GaussianPrediction::new(x.to_array(), var)?;
            let label = align_heading(&y.to_array(), &pred.mean);
            Ok(PredictionRecord {
                iter: i,
                t: f.t,
                raw: pred,
                calibrated: pred,
                quantile: [1.0; 6],
                fallback: false,
                label,
                dead_reckoning: align_heading(&x.to_array(), &label),
            })
        })
        .collect()
}
