//! Central finite differences, used as an independent check on the
//! analytic backward pass.

use crate::error::Result;
use crate::kernel::Matrix;

use super::gru::{gru_forward, mse_loss};
use super::params::GruParams;

/// `(f(x + step) - f(x - step)) / (2 step)`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// MSE of one sequence run from `h0`.
pub fn sequence_loss(params: &GruParams, inputs: &Matrix, h0: &[f64], targets: &Matrix) -> Result<f64> {
    let trace = gru_forward(params, inputs, h0)?;
    Ok(mse_loss(&trace.outputs(0), targets)?.0)
}

/// Central-difference gradient of [`sequence_loss`] for every parameter.
/// Cost is two forward passes per parameter, so keep instances small.
pub fn finite_diff_grad(
    params: &GruParams,
    inputs: &Matrix,
    h0: &[f64],
    targets: &Matrix,
    step: f64,
) -> Result<GruParams> {
    let mut probe = params.clone();
    let mut grads = GruParams::zeros(params.dims());
    for i in 0..params.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + step;
        let up = sequence_loss(&probe, inputs, h0, targets)?;
        probe.as_mut_slice()[i] = orig - step;
        let down = sequence_loss(&probe, inputs, h0, targets)?;
        probe.as_mut_slice()[i] = orig;
        grads.as_mut_slice()[i] = (up - down) / (2.0 * step);
    }
    Ok(grads)
}
