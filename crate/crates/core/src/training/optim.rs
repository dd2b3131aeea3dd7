use std::f64::consts::PI;

use super::config::{OptimizerKind, TrainConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Per-parameter accumulators and the number of updates applied.
///
/// `first` holds Adam's first moments; `second` holds Adam's second moments
/// or AdaGrad's running sum of squared gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        OptimizerState {
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    fn check(&self, params: &[Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::shape(
                "optimizer",
                &[params.len(), self.first.len()],
                &[grads.len()],
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.numel() != g.len() || p.numel() != m.len() {
                return Err(Error::shape("optimizer", p.shape(), &[g.len(), m.len()]));
            }
        }
        Ok(())
    }
}

/// Moment and decay settings shared by the adaptive optimizers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        AdamHyper {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// `θ ← θ − lr·g`
pub fn step_sgd(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    state.check(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, g) in p.values_mut().iter_mut().zip(g) {
            *w -= lr * g;
        }
    }
    state.step += 1;
    Ok(())
}

/// `acc ← acc + g²; θ ← θ − lr·g / (√acc + eps)`
pub fn step_adagrad(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    eps: f64,
) -> Result<()> {
    state.check(params, grads)?;
    for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut state.second) {
        for ((w, g), a) in p.values_mut().iter_mut().zip(g).zip(acc.iter_mut()) {
            *a += g * g;
            *w -= lr * g / (a.sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}

/// Adam with bias-corrected moments. Weight decay is ignored.
pub fn step_adam(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    h: &AdamHyper,
) -> Result<()> {
    state.check(params, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        for (((w, &g), m), v) in p
            .values_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + h.eps);
        }
    }
    Ok(())
}

/// Adam followed by decoupled decay `θ ← θ − lr·wd·θ`.
pub fn step_adamw(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    h: &AdamHyper,
) -> Result<()> {
    step_adam(params, grads, state, lr, h)?;
    if h.weight_decay != 0.0 {
        for p in params.iter_mut() {
            for w in p.values_mut() {
                *w -= lr * h.weight_decay * *w;
            }
        }
    }
    Ok(())
}

/// Dispatches one update for the configured optimizer.
pub fn apply_step(
    kind: OptimizerKind,
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    h: &AdamHyper,
) -> Result<()> {
    match kind {
        OptimizerKind::Sgd => step_sgd(params, grads, state, lr),
        OptimizerKind::Adagrad => step_adagrad(params, grads, state, lr, h.eps),
        OptimizerKind::Adam => step_adam(params, grads, state, lr, h),
        OptimizerKind::Adamw => step_adamw(params, grads, state, lr, h),
    }
}

/// Half-cosine decay from `lr0` at epoch 0 to `lr_min` at `max_epochs`.
pub fn cosine_lr(epoch: usize, max_epochs: usize, lr0: f64, lr_min: f64) -> f64 {
    if max_epochs == 0 || epoch == 0 {
        return lr0;
    }
    if epoch >= max_epochs {
        return lr_min;
    }
    let progress = epoch as f64 / max_epochs as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * progress).cos())
}
