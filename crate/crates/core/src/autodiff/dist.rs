use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{AutodiffError, Tape, Tensor, Var};

/// Lower bound added to every softplus variance head.
pub const VARIANCE_FLOOR: f64 = 1e-6;

fn check_positive(t: &Tensor) -> Result<(), AutodiffError> {
    match t.data().iter().find(|v| !(**v > 0.0)) {
        Some(&bad) => Err(AutodiffError::NonPositiveVariance(bad)),
        None => Ok(()),
    }
}

/// `softplus(raw) + VARIANCE_FLOOR`, the positive variance parameterization
/// used by every Gaussian head.
pub fn softplus_variance(tape: &mut Tape, raw: Var) -> Result<Var, AutodiffError> {
    let sp = tape.softplus(raw)?;
    let floor = tape.constant(Tensor::scalar(VARIANCE_FLOOR))?;
    tape.add(sp, floor)
}

/// Gaussian negative log-likelihood
/// `1/(2N) * sum_ij [ln(2 pi var_ij) + (y_ij - mu_ij)^2 / var_ij]`
/// where `N` is the number of rows.
pub fn gaussian_nll(tape: &mut Tape, y: Var, mu: Var, var: Var) -> Result<Var, AutodiffError> {
    let (ty, tm, tv) = (tape.value(y), tape.value(mu), tape.value(var));
    if ty.shape() != tm.shape() || ty.shape() != tv.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op: "gaussian_nll",
            lhs: ty.shape().to_vec(),
            rhs: tv.shape().to_vec(),
        });
    }
    check_positive(tv)?;
    let n = ty.rows() as f64;
    let diff = tape.sub(y, mu)?;
    let sq = tape.mul(diff, diff)?;
    let quad = tape.div(sq, var)?;
    let scaled = tape.scale(var, 2.0 * PI)?;
    let logv = tape.log(scaled)?;
    let terms = tape.add(logv, quad)?;
    let total = tape.sum(terms)?;
    tape.scale(total, 0.5 / n)
}

/// `KL(N(mu1, var1) || N(mu2, var2))` for diagonal Gaussians, summed over all
/// entries.
pub fn diag_gaussian_kl(
    tape: &mut Tape,
    mu1: Var,
    var1: Var,
    mu2: Var,
    var2: Var,
) -> Result<Var, AutodiffError> {
    check_positive(tape.value(var1))?;
    check_positive(tape.value(var2))?;
    let ratio = tape.div(var2, var1)?;
    let log_ratio = tape.log(ratio)?;
    let d = tape.sub(mu1, mu2)?;
    let d2 = tape.mul(d, d)?;
    let num = tape.add(var1, d2)?;
    let frac = tape.div(num, var2)?;
    let one = tape.constant(Tensor::scalar(1.0))?;
    let inner = tape.add(log_ratio, frac)?;
    let inner = tape.sub(inner, one)?;
    let total = tape.sum(inner)?;
    tape.scale(total, 0.5)
}

/// `z = mu + sqrt(var) * eps` with `eps ~ N(0, I)` drawn from `rng`.
pub fn reparameterized_sample<R: Rng + ?Sized>(
    tape: &mut Tape,
    mu: Var,
    var: Var,
    rng: &mut R,
) -> Result<Var, AutodiffError> {
    let tv = tape.value(var);
    if tape.value(mu).shape() != tv.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op: "reparameterized_sample",
            lhs: tape.value(mu).shape().to_vec(),
            rhs: tv.shape().to_vec(),
        });
    }
    check_positive(tv)?;
    let shape = tv.shape().to_vec();
    let noise: Vec<f64> = (0..tv.numel()).map(|_| rng.sample(StandardNormal)).collect();
    let eps = tape.constant(Tensor::new(shape, noise)?)?;
    let sd = tape.sqrt(var)?;
    let scaled = tape.mul(sd, eps)?;
    tape.add(mu, scaled)
}
