//! Finite-difference audit of the full model's parameter gradients.

use super::params::ModelParams;
use crate::autodiff::gradcheck::relative_error;
use crate::autodiff::{Tape, Tensor};
use crate::error::Result;

/// Worst relative error observed for one parameter tensor.
#[derive(Clone, Debug)]
pub struct GradientAudit {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

/// BCE loss of the model on a labelled batch `[B, T, d_in]`.
pub fn batch_loss(params: &ModelParams, windows: &Tensor, labels: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<_> = params
        .tensors()
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let x = tape.constant(windows.clone());
    let pass = params.forward_batch(&mut tape, &vars, x, None)?;
    let loss = tape.bce_loss(pass.scores, labels)?;
    Ok(tape.value(loss).item())
}

/// Compares tape gradients of the batch BCE loss against central
/// differences with step `h`, parameter by parameter.
///
/// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator so
/// that vanishing gradients are judged on an absolute scale.
pub fn audit_gradients(
    params: &ModelParams,
    windows: &Tensor,
    labels: &[f64],
    h: f64,
    floor: f64,
) -> Result<Vec<GradientAudit>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let x = tape.constant(windows.clone());
    let pass = params.forward_batch(&mut tape, &vars, x, None)?;
    let loss = tape.bce_loss(pass.scores, labels)?;
    let grads = tape.backward(loss)?;

    let mut work = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for (p, name) in params.names().iter().enumerate() {
        let analytic = grads.get(vars[p]).expect("parameter gradient");
        let mut worst = 0.0f64;
        for (i, &a) in analytic.iter().enumerate() {
            let orig = work.tensors()[p].values()[i];
            work.tensors_mut()[p].values_mut()[i] = orig + h;
            let up = batch_loss(&work, windows, labels)?;
            work.tensors_mut()[p].values_mut()[i] = orig - h;
            let down = batch_loss(&work, windows, labels)?;
            work.tensors_mut()[p].values_mut()[i] = orig;
            worst = worst.max(relative_error(a, (up - down) / (2.0 * h), floor));
        }
        report.push(GradientAudit {
            name: name.clone(),
            max_rel_error: worst,
            max_abs_grad: analytic.iter().fold(0.0, |m, g| m.max(g.abs())),
        });
    }
    Ok(report)
}
