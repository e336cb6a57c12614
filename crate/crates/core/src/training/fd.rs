//! Central finite differences over every parameter, as a gradient oracle.

use crate::deepnet::DeepOptEqModel;
use crate::error::{Error, Result};

use super::{flatten_parameters, with_parameters, GradientBundle};

/// Largest parameter count [`finite_diff_grad`] accepts.
pub const MAX_FD_PARAMETERS: usize = 10_000;

/// `(f(θ + h eᵢ) − f(θ − h eᵢ)) / 2h` for every coordinate `i`, in the
/// [`GradientBundle::flatten`] order.
pub fn finite_diff_grad<F>(model: &DeepOptEqModel, objective: F, step: f64) -> Result<GradientBundle>
where
    F: Fn(&DeepOptEqModel) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid("step", "must be positive"));
    }
    let theta = flatten_parameters(model);
    if theta.len() > MAX_FD_PARAMETERS {
        return Err(Error::invalid(
            "model",
            format!("{} parameters exceed the finite-difference limit {MAX_FD_PARAMETERS}", theta.len()),
        ));
    }
    let mut grad = Vec::with_capacity(theta.len());
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        probe[i] = theta[i] + step;
        let plus = objective(&with_parameters(model, &probe)?)?;
        probe[i] = theta[i] - step;
        let minus = objective(&with_parameters(model, &probe)?)?;
        probe[i] = theta[i];
        grad.push((plus - minus) / (2.0 * step));
    }
    GradientBundle::from_flat(model, &grad)
}
