//! Central finite-difference verification of the analytic gradients.

use super::network::DenoiserModel;
use super::params::ParamSet;
use super::train::{loss_and_grads, TrainingBatch};
use crate::error::{Error, Result};
use crate::numerics::RandomStream;

const FD_STEP: f64 = 1e-5;

/// One scalar parameter: tensor index and flat element index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub tensor: usize,
    pub index: usize,
}

/// `count` probes cycling through every tensor, each at a random element.
pub fn probe_round_robin(params: &ParamSet, count: usize, stream: &mut RandomStream) -> Vec<Probe> {
    let n = params.tensors.len();
    (0..count)
        .filter(|_| n > 0)
        .map(|i| {
            let tensor = i % n;
            let len = params.tensors[tensor].len() as u64;
            Probe {
                tensor,
                index: (stream.next_u64() % len) as usize,
            }
        })
        .collect()
}

/// Adds `N(0, std^2)` noise to every parameter, so that zero-initialized
/// tensors also carry gradient signal.
pub fn jitter_parameters(model: &mut DenoiserModel, std: f64, stream: &mut RandomStream) {
    for t in model.params_mut().tensors.iter_mut() {
        for v in t.data.iter_mut() {
            *v += std * stream.next_standard_normal();
        }
    }
}

/// Synthetic batch of `n` diffused Gaussian inputs of length `d`.
pub fn random_batch(d: usize, n: usize, stream: &mut RandomStream) -> TrainingBatch {
    let mut batch = TrainingBatch {
        x_t: Vec::with_capacity(n * d),
        t: Vec::with_capacity(n),
        h: Vec::with_capacity(n * d),
        eps: Vec::with_capacity(n * d),
    };
    for _ in 0..n {
        let x0: Vec<f64> = (0..d).map(|_| stream.next_standard_normal()).collect();
        let t = stream.next_uniform();
        let p = crate::diffusion::forward_diffuse(&x0, t, stream);
        batch.x_t.extend(p.x_t);
        batch.t.push(t);
        batch.h.extend(p.h);
        batch.eps.extend(p.eps_scaled);
    }
    batch
}

/// Max relative error between analytic gradients and central differences.
pub fn grad_check(model: &DenoiserModel, batch: &TrainingBatch, probes: &[Probe]) -> Result<f64> {
    let (_, grads) = loss_and_grads(model, batch)?;
    grad_check_against(model, batch, &grads, probes)
}

/// As [`grad_check`], but compares against caller-supplied gradients.
pub fn grad_check_against(model: &DenoiserModel, batch: &TrainingBatch, grads: &ParamSet, probes: &[Probe]) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::InvalidProbe);
    }
    model.params().check_same_layout(grads)?;
    let mut work = model.clone();
    let mut worst = 0.0f64;
    for p in probes {
        let len = work.params().tensors.get(p.tensor).map_or(0, |t| t.len());
        if p.index >= len {
            return Err(Error::InvalidProbe);
        }
        let original = work.params().tensors[p.tensor].data[p.index];
        let mut loss_at = |v: f64| -> Result<f64> {
            work.params_mut().tensors[p.tensor].data[p.index] = v;
            let pred = work.predict_batch(&batch.x_t, &batch.t)?;
            let sq: f64 = pred
                .h_hat
                .iter()
                .zip(&batch.h)
                .chain(pred.eps_hat.iter().zip(&batch.eps))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Ok(sq / batch.len() as f64)
        };
        let plus = loss_at(original + FD_STEP)?;
        let minus = loss_at(original - FD_STEP)?;
        work.params_mut().tensors[p.tensor].data[p.index] = original;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let analytic = grads.tensors[p.tensor].data[p.index];
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
