//! Evaluation metrics over aligned `N x 6` state arrays.

#[allow(unused_imports)] // inherent f64 math shadows it when std is linked
use num_traits::Float;

use crate::autodiff::{gaussian_nll, AutodiffError, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("arrays differ in length ({0} vs {1})")]
    ShapeMismatch(usize, usize),
    #[error("no rows to evaluate")]
    Empty,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

fn check(a: usize, b: usize) -> Result<(), MetricsError> {
    if a != b {
        Err(MetricsError::ShapeMismatch(a, b))
    } else if a == 0 {
        Err(MetricsError::Empty)
    } else {
        Ok(())
    }
}

/// `sqrt(1/N * sum_i sum_j (Y_ij - Yhat_ij)^2)`: squared errors of all six
/// states are summed inside the per-row mean.
pub fn rmse(y: &[[f64; 6]], y_hat: &[[f64; 6]]) -> Result<f64, MetricsError> {
    check(y.len(), y_hat.len())?;
    let total: f64 = y
        .iter()
        .zip(y_hat)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)))
        .sum();
    Ok((total / y.len() as f64).sqrt())
}

fn rows(r: &[[f64; 6]]) -> Tensor {
    let data = r.iter().flatten().copied().collect();
    Tensor::new(alloc::vec![r.len(), 6], data).expect("row shape")
}

/// Gaussian negative log-likelihood
/// `1/(2N) * sum_ij [ln(2 pi var_ij) + (Y_ij - Yhat_ij)^2 / var_ij]`.
pub fn nll(y: &[[f64; 6]], y_hat: &[[f64; 6]], var: &[[f64; 6]]) -> Result<f64, MetricsError> {
    check(y.len(), y_hat.len())?;
    check(y.len(), var.len())?;
    let mut tape = Tape::new();
    let y = tape.constant(rows(y))?;
    let mu = tape.constant(rows(y_hat))?;
    let v = tape.constant(rows(var))?;
    let l = gaussian_nll(&mut tape, y, mu, v)?;
    Ok(tape.value(l).item())
}

/// `label` with its heading moved by a multiple of 2 pi to lie within pi of
/// `reference`'s heading.
pub fn align_heading(label: &[f64; 6], reference: &[f64; 6]) -> [f64; 6] {
    let mut out = *label;
    out[2] = reference[2] + crate::physics::wrap_angle(label[2] - reference[2]);
    out
}
