//! Split conformal calibration of the fused standard deviation.
//!
//! Scores are sigma-normalized absolute residuals, one stream per state
//! dimension; each quantile multiplies the matching standard deviation.

use alloc::collections::VecDeque;

#[allow(unused_imports)] // inherent f64 math shadows it when std is linked
use num_traits::Float;

use crate::np::GaussianPrediction;

/// Multiplier on the largest score when the conformal rank exceeds `n`.
pub const SATURATION_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConformalError {
    #[error("standard deviation must be positive (dimension {0})")]
    ZeroSigma(usize),
    #[error("alpha must lie in [0, 1] (got {0})")]
    BadAlpha(f64),
    #[error("{n} scores, at least {needed} required")]
    Insufficient { n: usize, needed: usize },
    #[error("score must be finite and non-negative (got {0})")]
    BadScore(f64),
    #[error("label and prediction streams differ in length ({0} vs {1})")]
    Misaligned(usize, usize),
    #[error("invalid calibration configuration: {0}")]
    BadConfig(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConformalConfig {
    pub alpha: f64,
    /// Most recent scores kept per dimension.
    pub window: usize,
    /// Iterations between refits.
    pub refit_period: usize,
    pub min_scores: usize,
}

impl Default for ConformalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            window: 500,
            refit_period: 100,
            min_scores: 10,
        }
    }
}

impl ConformalConfig {
    pub fn validate(&self) -> Result<(), ConformalError> {
        check_alpha(self.alpha)?;
        if self.refit_period == 0 {
            return Err(ConformalError::BadConfig("refit_period must be positive"));
        }
        if self.min_scores < 10 {
            return Err(ConformalError::BadConfig("min_scores must be at least 10"));
        }
        if self.window < self.min_scores {
            return Err(ConformalError::BadConfig("window smaller than min_scores"));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<(), ConformalError> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(ConformalError::BadAlpha(alpha))
    }
}

/// `|y_j - mu_j| / sigma_j` per dimension.
pub fn score(y: &[f64; 6], pred: &GaussianPrediction) -> Result<[f64; 6], ConformalError> {
    let sd = pred.std();
    let mut s = [0.0; 6];
    for j in 0..6 {
        if !(sd[j] > 0.0) {
            return Err(ConformalError::ZeroSigma(j));
        }
        s[j] = (y[j] - pred.mean[j]).abs() / sd[j];
    }
    Ok(s)
}

/// The `ceil((n + 1)(1 - alpha))`-th smallest score. When that rank exceeds
/// `n` the largest score times [`SATURATION_FACTOR`] is returned and the flag
/// is set.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<(f64, bool), ConformalError> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(ConformalError::Insufficient { n: 0, needed: 1 });
    }
    if let Some(bad) = scores.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(ConformalError::BadScore(*bad));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // guard the product against 0.9 * 10 = 9.000000000000002
    let exact = (n + 1) as f64 * (1.0 - alpha);
    let rank = ((exact - 1e-9).ceil().max(1.0)) as usize;
    if rank > n {
        Ok((sorted[n - 1] * SATURATION_FACTOR, true))
    } else {
        Ok((sorted[rank - 1], false))
    }
}

/// Sliding window of recent scores for each dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    pub alpha: f64,
    pub window: usize,
    scores: [VecDeque<f64>; 6],
}

impl CalibrationSet {
    pub fn new(alpha: f64, window: usize) -> Result<Self, ConformalError> {
        check_alpha(alpha)?;
        if window == 0 {
            return Err(ConformalError::BadConfig("window must be positive"));
        }
        Ok(Self {
            alpha,
            window,
            scores: Default::default(),
        })
    }

    pub fn push(&mut self, s: [f64; 6]) -> Result<(), ConformalError> {
        if let Some(bad) = s.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(ConformalError::BadScore(*bad));
        }
        for (q, v) in self.scores.iter_mut().zip(s) {
            if q.len() == self.window {
                q.pop_front();
            }
            q.push_back(v);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scores(&self, dim: usize) -> &VecDeque<f64> {
        &self.scores[dim]
    }
}

/// Per-dimension quantiles with the iteration they were fitted at.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantileVector {
    pub q: [f64; 6],
    pub fitted_at: u64,
    pub n: usize,
    /// Dimensions whose rank exceeded `n`.
    pub saturated: [bool; 6],
}

impl QuantileVector {
    /// The identity calibration used before the first fit.
    pub fn unit() -> Self {
        Self {
            q: [1.0; 6],
            fitted_at: 0,
            n: 0,
            saturated: [false; 6],
        }
    }
}

/// Fits quantiles from `cal`, refusing when fewer than `min_scores` (at
/// least 10) are held.
pub fn fit_quantile(
    cal: &CalibrationSet,
    min_scores: usize,
    at: u64,
) -> Result<QuantileVector, ConformalError> {
    let needed = min_scores.max(10);
    let n = cal.len();
    if n < needed {
        return Err(ConformalError::Insufficient { n, needed });
    }
    let mut out = QuantileVector {
        q: [0.0; 6],
        fitted_at: at,
        n,
        saturated: [false; 6],
    };
    for j in 0..6 {
        let s: alloc::vec::Vec<f64> = cal.scores[j].iter().copied().collect();
        let (q, sat) = conformal_quantile(&s, cal.alpha)?;
        out.q[j] = q;
        out.saturated[j] = sat;
    }
    Ok(out)
}

/// Multiplies each standard deviation by its quantile; the mean is kept.
pub fn apply(pred: &GaussianPrediction, q: &QuantileVector) -> GaussianPrediction {
    let mut out = *pred;
    for j in 0..6 {
        out.var[j] *= q.q[j] * q.q[j];
    }
    out
}

/// Fraction of labels with `|y - mu| <= sigma`, per dimension.
pub fn coverage_eval(
    labels: &[[f64; 6]],
    preds: &[GaussianPrediction],
) -> Result<[f64; 6], ConformalError> {
    if labels.len() != preds.len() {
        return Err(ConformalError::Misaligned(labels.len(), preds.len()));
    }
    if labels.is_empty() {
        return Err(ConformalError::Insufficient { n: 0, needed: 1 });
    }
    let mut hits = [0usize; 6];
    for (y, p) in labels.iter().zip(preds) {
        let sd = p.std();
        for j in 0..6 {
            if (y[j] - p.mean[j]).abs() <= sd[j] {
                hits[j] += 1;
            }
        }
    }
    Ok(hits.map(|h| h as f64 / labels.len() as f64))
}
