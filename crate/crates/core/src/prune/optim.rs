use serde::{Deserialize, Serialize};

use crate::net::Mask;
use crate::scalar::Scalar;

use super::train::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// L2 penalty folded into the gradient.
    Adam,
    /// Decoupled weight decay.
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    /// `(epoch, multiplier)`: from `epoch` on, the rate is `lr · multiplier`.
    pub lr_steps: Vec<(usize, f64)>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::AdamW,
            lr: 5e-3,
            lr_steps: Vec::new(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            batch_size: 1024,
            epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.lr_steps.iter().any(|&(_, m)| !(m > 0.0)) {
            return bad("lr_steps multipliers must be positive");
        }
        Ok(())
    }
}

/// Learning rate in effect during `epoch` (0-based) of a cycle.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr_steps
        .iter()
        .filter(|&&(e, _)| e <= epoch)
        .max_by_key(|&&(e, _)| e)
        .map_or(cfg.lr, |&(_, m)| cfg.lr * m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam(W) update at learning rate `lr`, advancing
/// `state.step`. Masked entries are forced back to zero afterwards.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    lr: f64,
    mask: Option<&Mask>,
) -> Result<(), TrainError> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(TrainError::Config(format!(
            "optimizer shapes disagree: params {n}, grads {}, state {}",
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { index: i, step: state.step + 1 });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, wd, eps) = (T::of(lr), T::of(cfg.weight_decay), T::of(cfg.eps));
    for i in 0..n {
        let mut g = grads[i];
        match cfg.optimizer {
            Optimizer::Adam => g += wd * params[i],
            Optimizer::AdamW => params[i] -= lr * wd * params[i],
        }
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + eps);
    }
    if let Some(mask) = mask {
        mask.apply_in_place(&mut params[..mask.len()]);
    }
    Ok(())
}
