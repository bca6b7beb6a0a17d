//! Coverage study of the conformal calibration on exchangeable synthetic
//! residuals.

use std::fmt::Write as _;

use mfrpinp_core::conformal::{apply, coverage_eval, fit_quantile, score, CalibrationSet};
use mfrpinp_core::np::GaussianPrediction;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct CoverageStudy {
    pub alpha: f64,
    pub calibration: usize,
    pub test: usize,
    pub trials: usize,
    pub seed: u64,
    /// Ratio of the true residual spread to the reported one.
    pub miscalibration: f64,
}

impl Default for CoverageStudy {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            calibration: 500,
            test: 500,
            trials: 10,
            seed: 0,
            miscalibration: 1.7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoverageResult {
    pub study: CoverageStudy,
    /// Per-trial, per-dimension empirical coverage.
    pub coverage: Vec<[f64; 6]>,
    /// Acceptance band for the mean coverage of a trial.
    pub band: (f64, f64),
}

impl CoverageResult {
    pub fn trial_means(&self) -> Vec<f64> {
        self.coverage.iter().map(|c| c.iter().sum::<f64>() / 6.0).collect()
    }

    pub fn in_band(&self) -> usize {
        self.trial_means()
            .iter()
            .filter(|m| (self.band.0..=self.band.1).contains(*m))
            .count()
    }

    /// At least nine in ten trials inside the band.
    pub fn passed(&self) -> bool {
        self.in_band() * 10 >= self.coverage.len() * 9
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "alpha {}: {} calibration + {} test points per trial\n",
            self.study.alpha, self.study.calibration, self.study.test
        );
        for (i, (c, m)) in self.coverage.iter().zip(self.trial_means()).enumerate() {
            let dims = c.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ");
            let _ = writeln!(s, "trial {i:>2}: mean {m:.4}  [{dims}]");
        }
        let _ = writeln!(
            s,
            "{}/{} trials within [{:.2}, {:.2}]",
            self.in_band(),
            self.coverage.len(),
            self.band.0,
            self.band.1
        );
        s
    }
}

/// One trial: heteroscedastic Gaussian residuals whose true spread is
/// `miscalibration` times the reported sigma.
pub fn coverage_trial(study: &CoverageStudy, seed: u64) -> Result<[f64; 6]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let sigma = Uniform::new(0.1, 2.0).expect("sigma range");
    let k = study.miscalibration;
    let mut draw = || {
        let sd: [f64; 6] = std::array::from_fn(|_| sigma.sample(&mut rng));
        let mean: [f64; 6] = std::array::from_fn(|_| 5.0 * unit.sample(&mut rng));
        let y: [f64; 6] = std::array::from_fn(|j| mean[j] + k * sd[j] * unit.sample(&mut rng));
        GaussianPrediction::new(mean, sd.map(|s| s * s)).map(|p| (y, p))
    };
    let mut cal = CalibrationSet::new(study.alpha, study.calibration)?;
    for _ in 0..study.calibration {
        let (y, p) = draw()?;
        cal.push(score(&y, &p)?)?;
    }
    let q = fit_quantile(&cal, 10, 0)?;
    let mut labels = Vec::with_capacity(study.test);
    let mut preds = Vec::with_capacity(study.test);
    for _ in 0..study.test {
        let (y, p) = draw()?;
        labels.push(y);
        preds.push(apply(&p, &q));
    }
    Ok(coverage_eval(&labels, &preds)?)
}

pub fn run_study(study: &CoverageStudy) -> Result<CoverageResult> {
    if study.trials == 0 || study.test == 0 {
        return Err(Error::validation("trials and test points must be positive"));
    }
    let coverage = (0..study.trials as u64)
        .map(|i| coverage_trial(study, study.seed.wrapping_add(i)))
        .collect::<Result<Vec<_>>>()?;
    let target = 1.0 - study.alpha;
    Ok(CoverageResult {
        study: *study,
        coverage,
        band: (target - 0.03, (target + 0.05).min(1.0)),
    })
}
