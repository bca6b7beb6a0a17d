use alloc::collections::BTreeMap;
use alloc::string::String;

#[allow(unused_imports)] // inherent f64 math shadows it when std is linked
use num_traits::Float;

use super::{AutodiffError, ParameterSet, Tensor};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-7;

/// Adam moments and hyperparameters. Weight decay is decoupled: each step
/// first shrinks `p` by `lr * weight_decay * p`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepStatus {
    Applied,
    /// At least one gradient entry was NaN or infinite; nothing was changed.
    SkippedNonFinite,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(DEFAULT_LEARNING_RATE, DEFAULT_WEIGHT_DECAY)
    }
}

impl AdamState {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn validate(&self) -> Result<(), AutodiffError> {
        let ok = self.lr > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(AutodiffError::InvalidHyperparameter)
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.v.get(name)
    }
}

/// One Adam update of every parameter that has a gradient in `grads`.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
) -> Result<StepStatus, AutodiffError> {
    state.validate()?;
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Ok(StepStatus::SkippedNonFinite);
        }
    }

    state.t += 1;
    let t = state.t as f64;
    let (b1, b2, lr, wd, eps) = (state.beta1, state.beta2, state.lr, state.weight_decay, state.eps);
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);

    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for i in 0..g.numel() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mut pi = p.data()[i];
            pi -= lr * wd * pi;
            pi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            p.data_mut()[i] = pi;
        }
    }
    params.bump_version();
    Ok(StepStatus::Applied)
}
