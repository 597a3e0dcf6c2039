use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, TrainMeta};
use super::network::{init_model, DenoiserModel, FlopCount, ModelConfig};
use super::optim::{ema_update, optimizer_step, AdamW, EmaSchedule, LrSchedule};
use super::params::ParamSet;
use crate::channel::LinearChannel;
use crate::diffusion::forward_diffuse;
use crate::error::{Error, Result};
use crate::modem::{sample_symbols, Constellation};
use crate::numerics::{make_stream, RandomStream};

/// Steps averaged into the reported final loss.
const LOSS_WINDOW: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub ema_decay: f64,
    pub ema_start: usize,
    pub ema_every: usize,
    /// Timesteps are drawn uniformly from the open-closed interval `(lo, hi]`.
    pub t_range: [f64; 2],
    pub seed: u64,
    pub cosine_decay: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            weight_decay: 1e-4,
            warmup_iters: 250,
            batch_size: 256,
            total_steps: 20_000,
            ema_decay: 0.9996,
            ema_start: 1000,
            ema_every: 8,
            t_range: [0.0, 1.0],
            seed: 0,
            cosine_decay: false,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Timestep range for models used only at high SNR.
    pub const HIGH_SNR_T_RANGE: [f64; 2] = [0.0, 0.2];

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.t_range;
        if !(lo >= 0.0 && lo < hi && hi <= 1.0) {
            return Err(Error::InvalidConfig(format!("t_range [{lo}, {hi}] not inside (0, 1]")));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::InvalidConfig(format!("ema_decay {} outside (0, 1)", self.ema_decay)));
        }
        if self.batch_size == 0 || self.total_steps == 0 || self.ema_every == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, total_steps and ema_every must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("lr must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            warmup_iters: self.warmup_iters,
            cosine_total: self.cosine_decay.then_some(self.total_steps),
        }
    }

    pub fn ema_schedule(&self) -> EmaSchedule {
        EmaSchedule {
            decay: self.ema_decay,
            start: self.ema_start,
            every: self.ema_every,
        }
    }

    /// Uniform draw from the half-open interval `(lo, hi]`.
    pub fn sample_t(&self, stream: &mut RandomStream) -> f64 {
        let [lo, hi] = self.t_range;
        hi - (hi - lo) * stream.next_uniform()
    }
}

/// Flattened training examples: sample `b` occupies `[b*d, (b+1)*d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub x_t: Vec<f64>,
    pub t: Vec<f64>,
    /// Target for the first head, `-x0`.
    pub h: Vec<f64>,
    /// Target for the second head, `sqrt(t) * eps`.
    pub eps: Vec<f64>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Mean loss of the predictor that always outputs zero.
    pub fn null_loss(&self) -> f64 {
        let total: f64 = self.h.iter().chain(&self.eps).map(|v| v * v).sum();
        total / self.len() as f64
    }
}

/// Draws `batch_size` diffused examples with `x0 = H s`.
pub fn sample_batch(
    cfg: &TrainConfig,
    ch: &LinearChannel,
    c: &Constellation,
    batch_size: usize,
    stream: &mut RandomStream,
) -> Result<TrainingBatch> {
    let n_sym = symbols_per_block(ch, c)?;
    let d = ch.d();
    let mut batch = TrainingBatch {
        x_t: Vec::with_capacity(batch_size * d),
        t: Vec::with_capacity(batch_size),
        h: Vec::with_capacity(batch_size * d),
        eps: Vec::with_capacity(batch_size * d),
    };
    for _ in 0..batch_size {
        let s = sample_symbols(c, n_sym, stream);
        let x0 = ch.apply(&s.coords)?;
        let t = cfg.sample_t(stream);
        let point = forward_diffuse(&x0, t, stream);
        batch.x_t.extend_from_slice(&point.x_t);
        batch.t.push(t);
        batch.h.extend_from_slice(&point.h);
        batch.eps.extend_from_slice(&point.eps_scaled);
    }
    Ok(batch)
}

fn symbols_per_block(ch: &LinearChannel, c: &Constellation) -> Result<usize> {
    if !ch.d().is_multiple_of(c.dims()) {
        return Err(Error::DimensionMismatch {
            expected: c.dims() * (ch.d() / c.dims()).max(1),
            got: ch.d(),
        });
    }
    Ok(ch.d() / c.dims())
}

/// Batch-mean of `|h_hat - h|^2 + |eps_hat - eps|^2` and its exact gradient.
pub fn loss_and_grads(model: &DenoiserModel, batch: &TrainingBatch) -> Result<(f64, ParamSet)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty training batch".into()));
    }
    let mut flops = FlopCount::default();
    let (pred, cache) = model.forward(&batch.x_t, &batch.t, &mut flops)?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut residual = |out: &[f64], target: &[f64]| -> Vec<f64> {
        out.iter()
            .zip(target)
            .map(|(o, y)| {
                let r = o - y;
                loss += r * r;
                2.0 * scale * r
            })
            .collect()
    };
    let d_h = residual(&pred.h_hat, &batch.h);
    let d_eps = residual(&pred.eps_hat, &batch.eps);
    let mut grads = model.params().zeros_like();
    model.backward(&cache, &d_h, &d_eps, &mut grads);
    Ok((loss * scale, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainProgress {
    pub step: usize,
    pub total_steps: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn train(cfg: &TrainConfig, model_cfg: &ModelConfig, ch: &LinearChannel, c: &Constellation) -> Result<Checkpoint> {
    train_with_progress(cfg, model_cfg, ch, c, &mut |_| {})
}

/// Full training run. Data and initialization use separate substreams of
/// `cfg.seed`, so the result depends on nothing else.
pub fn train_with_progress(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    ch: &LinearChannel,
    c: &Constellation,
    progress: &mut dyn FnMut(&TrainProgress),
) -> Result<Checkpoint> {
    cfg.validate()?;
    model_cfg.validate()?;
    symbols_per_block(ch, c)?;
    if model_cfg.input_dim() != ch.d() {
        return Err(Error::DimensionMismatch {
            expected: ch.d(),
            got: model_cfg.input_dim(),
        });
    }
    let mut data = make_stream(cfg.seed, 0);
    let mut model = init_model(model_cfg, &mut make_stream(cfg.seed, 1))?;
    let mut ema = model.params().clone();
    let mut opt = AdamW::new(model.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);
    let lr_schedule = cfg.lr_schedule();
    let ema_schedule = cfg.ema_schedule();
    let window_start = cfg.total_steps.saturating_sub(LOSS_WINDOW) + 1;
    let (mut window_loss, mut window_null, mut window_len) = (0.0, 0.0, 0usize);

    for step in 1..=cfg.total_steps {
        let batch = sample_batch(cfg, ch, c, cfg.batch_size, &mut data)?;
        let (loss, grads) = loss_and_grads(&model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::DivergedTraining { step, loss });
        }
        let lr = lr_schedule.at(step);
        optimizer_step(&mut opt, model.params_mut(), &grads, step, lr)?;
        if !model.params().is_finite() {
            return Err(Error::DivergedTraining { step, loss: f64::NAN });
        }
        if step < ema_schedule.start {
            ema.clone_from(model.params());
        } else if ema_schedule.is_due(step) {
            ema_update(&mut ema, model.params(), ema_schedule.decay)?;
        }
        if step >= window_start {
            window_loss += loss;
            window_null += batch.null_loss();
            window_len += 1;
        }
        progress(&TrainProgress {
            step,
            total_steps: cfg.total_steps,
            loss,
            lr,
        });
    }

    Ok(Checkpoint {
        model_config: model_cfg.clone(),
        train_config: Some(cfg.clone()),
        params: model.params().clone(),
        ema,
        meta: TrainMeta {
            seed: cfg.seed,
            steps: cfg.total_steps,
            final_loss: window_loss / window_len as f64,
            null_loss: window_null / window_len as f64,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::network::Conditioning;
    use crate::modem::{build_constellation, Scheme};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            token_len: 1,
            n_tokens: 2,
            model_dim: 8,
            n_heads: 2,
            depth: 1,
            head_depth: 1,
            t_embed_dim: 8,
            mlp_ratio: 2,
            conditioning: Conditioning::Sinusoidal,
        }
    }

    fn tiny_train(steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            total_steps: steps,
            lr: 1e-3,
            warmup_iters: 5,
            ema_start: 4,
            ema_every: 2,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            t_range: [0.3, 0.2],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            ema_decay: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            t_range: [0.0, 1.5],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn t_range_respected() {
        let cfg = TrainConfig {
            t_range: TrainConfig::HIGH_SNR_T_RANGE,
            ..TrainConfig::default()
        };
        let mut s = make_stream(1, 0);
        for _ in 0..100_000 {
            let t = cfg.sample_t(&mut s);
            assert!(t > 0.0 && t <= 0.2);
        }
    }

    #[test]
    fn matching_targets_give_zero_loss() {
        let model = init_model(&tiny_model(), &mut make_stream(1, 1)).unwrap();
        let x_t = vec![0.3, -0.2, 1.0, 0.5];
        let t = vec![0.3, 0.8];
        let pred = model.predict_batch(&x_t, &t).unwrap();
        let batch = TrainingBatch {
            x_t,
            t,
            h: pred.h_hat,
            eps: pred.eps_hat,
        };
        let (loss, grads) = loss_and_grads(&model, &batch).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn duplicated_batch_keeps_loss_and_grads() {
        let cfg = tiny_train(1);
        let ch = LinearChannel::identity(2, 0.0).unwrap();
        let c = build_constellation(Scheme::Bpsk);
        let model = init_model(&tiny_model(), &mut make_stream(1, 1)).unwrap();
        let batch = sample_batch(&cfg, &ch, &c, 5, &mut make_stream(2, 0)).unwrap();
        let mut doubled = batch.clone();
        doubled.x_t.extend_from_slice(&batch.x_t);
        doubled.t.extend_from_slice(&batch.t);
        doubled.h.extend_from_slice(&batch.h);
        doubled.eps.extend_from_slice(&batch.eps);
        let (l1, g1) = loss_and_grads(&model, &batch).unwrap();
        let (l2, g2) = loss_and_grads(&model, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-12 * l1.abs().max(1.0));
        for (a, b) in g1.tensors.iter().zip(&g2.tensors) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-10 * (1.0 + x.abs()), "{}", a.name);
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ch = LinearChannel::identity(2, 0.0).unwrap();
        let c = build_constellation(Scheme::Bpsk);
        let a = train(&tiny_train(12), &tiny_model(), &ch, &c).unwrap();
        let b = train(&tiny_train(12), &tiny_model(), &ch, &c).unwrap();
        assert_eq!(a.to_json_string().unwrap(), b.to_json_string().unwrap());
        assert_ne!(a.params, a.ema);
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let ch = LinearChannel::identity(4, 0.0).unwrap();
        let c = build_constellation(Scheme::Bpsk);
        assert!(matches!(
            train(&tiny_train(1), &tiny_model(), &ch, &c),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn diverging_lr_is_caught() {
        let ch = LinearChannel::identity(2, 0.0).unwrap();
        let c = build_constellation(Scheme::Bpsk);
        let cfg = TrainConfig {
            lr: 1e300,
            warmup_iters: 0,
            ..tiny_train(20)
        };
        assert!(matches!(
            train(&cfg, &tiny_model(), &ch, &c),
            Err(Error::DivergedTraining { .. })
        ));
    }
}
