use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};

/// Learning rate: linear warmup to `base`, then constant or cosine decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_iters: usize,
    /// Total steps for cosine decay after warmup; `None` keeps `base`.
    pub cosine_total: Option<usize>,
}

impl LrSchedule {
    /// Rate at 1-based iteration `iter`.
    pub fn at(&self, iter: usize) -> f64 {
        let warm = if self.warmup_iters == 0 {
            1.0
        } else {
            (iter as f64 / self.warmup_iters as f64).min(1.0)
        };
        match self.cosine_total {
            Some(total) if iter > self.warmup_iters && total > self.warmup_iters => {
                let progress = ((iter - self.warmup_iters) as f64 / (total - self.warmup_iters) as f64).min(1.0);
                self.base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
            _ => self.base * warm,
        }
    }
}

/// Adam moments plus decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: ParamSet,
    v: ParamSet,
}

impl AdamW {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One AdamW update at 1-based iteration `iter` with rate `lr`.
pub fn optimizer_step(state: &mut AdamW, params: &mut ParamSet, grads: &ParamSet, iter: usize, lr: f64) -> Result<()> {
    params.check_same_layout(grads)?;
    let iter = iter.max(1) as i32;
    let bc1 = 1.0 - state.beta1.powi(iter);
    let bc2 = 1.0 - state.beta2.powi(iter);
    let decay = 1.0 - lr * state.weight_decay;
    for (((p, g), m), v) in params
        .tensors
        .iter_mut()
        .zip(&grads.tensors)
        .zip(state.m.tensors.iter_mut())
        .zip(state.v.tensors.iter_mut())
    {
        for (((p, g), m), v) in p.data.iter_mut().zip(&g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            let step = (*m / bc1) / ((*v / bc2).sqrt() + state.eps);
            *p = *p * decay - lr * step;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaSchedule {
    pub decay: f64,
    pub start: usize,
    pub every: usize,
}

impl EmaSchedule {
    /// Whether the averaged weights are updated after 1-based step `step`.
    pub fn is_due(&self, step: usize) -> bool {
        step >= self.start && (step - self.start).is_multiple_of(self.every.max(1))
    }
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update(ema: &mut ParamSet, params: &ParamSet, decay: f64) -> Result<()> {
    ema.check_same_layout(params)?;
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::InvalidConfig(format!("EMA decay {decay} outside [0, 1]")));
    }
    for (e, p) in ema.tensors.iter_mut().zip(&params.tensors) {
        for (e, p) in e.data.iter_mut().zip(&p.data) {
            *e = decay * *e + (1.0 - decay) * p;
        }
    }
    Ok(())
}
