//! Optimizers (momentum SGD and LARS) and the warmup + cosine LR schedule.
//!
//! Normalization affines (gamma/beta) and biases are excluded from weight
//! decay and, under LARS, use the unscaled learning rate.

use crate::error::{Error, Result};
use crate::model::{ParamKind, ParamStore};
use crate::tensor::Tensor;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Lars,
}

fn excluded_from_decay(kind: ParamKind) -> bool {
    matches!(kind, ParamKind::Gamma | ParamKind::Beta | ParamKind::Bias)
}

fn check_finite(name: &str, g: &Tensor, step: u64) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, what: format!("non-finite gradient for {}", name) })
    }
}

/// Momentum SGD with decoupled weight decay:
/// theta <- theta - lr*wd*theta, then buf <- m*buf + g, theta <- theta - lr*buf.
pub fn sgd_step(
    store: &mut ParamStore,
    grads: &HashMap<String, Tensor>,
    bufs: &mut HashMap<String, Tensor>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    step: u64,
) -> Result<()> {
    for e in store.iter_mut() {
        if !e.trainable {
            continue;
        }
        let Some(grad) = grads.get(&e.name) else { continue };
        check_finite(&e.name, grad, step)?;
        let wd = if excluded_from_decay(e.kind) { 0.0 } else { weight_decay };
        let buf = bufs.entry(e.name.clone()).or_insert_with(|| Tensor::zeros(e.tensor.shape()));
        for ((t, b), g) in e.tensor.data_mut().iter_mut().zip(buf.data_mut()).zip(grad.data()) {
            *t -= lr * wd * *t;
            *b = momentum * *b + g;
            *t -= lr * *b;
        }
    }
    Ok(())
}

/// Layer-wise adaptive rate scaling. Per parameter tensor:
/// ratio = trust * ||theta|| / (||g|| + wd*||theta||), defined as 1 when the
/// parameter or the denominator has zero norm; effective gradient g + wd*theta;
/// momentum applied to the scaled update. Excluded params take the plain lr.
#[allow(clippy::too_many_arguments)]
pub fn lars_step(
    store: &mut ParamStore,
    grads: &HashMap<String, Tensor>,
    bufs: &mut HashMap<String, Tensor>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    trust_coeff: f64,
    step: u64,
) -> Result<()> {
    for e in store.iter_mut() {
        if !e.trainable {
            continue;
        }
        let Some(grad) = grads.get(&e.name) else { continue };
        check_finite(&e.name, grad, step)?;
        let excluded = excluded_from_decay(e.kind);
        let wd = if excluded { 0.0 } else { weight_decay };
        let local_lr = if excluded {
            lr
        } else {
            let wn = e.tensor.norm_l2();
            let gn = grad.norm_l2();
            let denom = gn + wd * wn;
            let ratio = if wn == 0.0 || denom == 0.0 { 1.0 } else { trust_coeff * wn / denom };
            lr * ratio
        };
        let buf = bufs.entry(e.name.clone()).or_insert_with(|| Tensor::zeros(e.tensor.shape()));
        for ((t, b), g) in e.tensor.data_mut().iter_mut().zip(buf.data_mut()).zip(grad.data()) {
            let geff = g + wd * *t;
            *b = momentum * *b + geff;
            *t -= local_lr * *b;
        }
    }
    Ok(())
}

/// Linear warmup from 0 to base_lr, then cosine decay to 0 at the final step.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl Schedule {
    pub fn total_steps(&self) -> u64 {
        (self.total_epochs * self.steps_per_epoch) as u64
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        let warm = (self.warmup_epochs * self.steps_per_epoch) as u64;
        let total = self.total_steps();
        if step > total {
            return Err(Error::Invalid(format!("step {} beyond schedule end {}", step, total)));
        }
        if warm > 0 && step < warm {
            return Ok(self.base_lr * step as f64 / warm as f64);
        }
        if total == warm {
            return Ok(self.base_lr);
        }
        let t = (step - warm) as f64 / (total - warm) as f64;
        Ok(self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}
