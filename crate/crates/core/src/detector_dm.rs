//! Diffusion detector: scale the received signal onto the diffusion marginal
//! at the SNR-matched timestep, denoise, invert the channel, decide.

use serde::{Deserialize, Serialize};

use crate::channel::{signal_power_per_dim, LinearChannel};
use crate::denoiser::DenoiserModel;
use crate::diffusion::{reconstruct_one_step, reverse_step, DiffusionSchedule, ScheduleMode};
use crate::error::{Error, Result};
use crate::modem::{nearest_symbol_decision, Constellation, SymbolBlock};
use crate::numerics::{RandomStream, RealMatrix};

/// Anything that predicts the drift and scaled noise of a diffused input.
pub trait Denoise {
    /// Required input length, if fixed.
    fn input_dim(&self) -> Option<usize>;

    fn denoise(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)>;

    /// Predictions for `xs.len() / d` concatenated inputs sharing one `t`.
    fn denoise_batch(&self, xs: &[f64], t: f64, d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut h = Vec::with_capacity(xs.len());
        let mut e = Vec::with_capacity(xs.len());
        for x in xs.chunks(d) {
            let (hx, ex) = self.denoise(x, t)?;
            h.extend(hx);
            e.extend(ex);
        }
        Ok((h, e))
    }
}

impl Denoise for DenoiserModel {
    fn input_dim(&self) -> Option<usize> {
        Some(DenoiserModel::input_dim(self))
    }

    fn denoise(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.predict(x, t)
    }

    fn denoise_batch(&self, xs: &[f64], t: f64, d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = xs.len() / d.max(1);
        let out = self.predict_batch(xs, &vec![t; n])?;
        Ok((out.h_hat, out.eps_hat))
    }
}

/// Predicts zero for both outputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullPredictor;

impl Denoise for NullPredictor {
    fn input_dim(&self) -> Option<usize> {
        None
    }

    fn denoise(&self, x: &[f64], _t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((vec![0.0; x.len()], vec![0.0; x.len()]))
    }
}

/// Knows the clean signal and returns the exact decomposition of its input.
/// For batched use `x0` holds the concatenated clean signals.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    pub x0: Vec<f64>,
}

impl Denoise for OraclePredictor {
    fn input_dim(&self) -> Option<usize> {
        None
    }

    fn denoise_batch(&self, xs: &[f64], t: f64, _d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.denoise(xs, t)
    }

    fn denoise(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.x0.len() {
            return Err(Error::DimensionMismatch {
                expected: self.x0.len(),
                got: x.len(),
            });
        }
        let h = self.x0.iter().map(|v| -v).collect();
        let eps = x.iter().zip(&self.x0).map(|(x, x0)| x - (1.0 - t) * x0).collect();
        Ok((h, eps))
    }
}

fn default_steps() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmOptions {
    #[serde(default)]
    pub mode: ScheduleMode,
    /// Relative change of the matched timestep, in percent.
    #[serde(default)]
    pub perturb_t_pct: f64,
    /// Relative change of the matched scaling factor, in percent.
    #[serde(default)]
    pub perturb_alpha_pct: f64,
    /// Reverse steps from `t` to 0; one step is the direct reconstruction.
    #[serde(default = "default_steps")]
    pub reverse_steps: usize,
}

impl Default for DmOptions {
    fn default() -> Self {
        Self {
            mode: ScheduleMode::Corrected,
            perturb_t_pct: 0.0,
            perturb_alpha_pct: 0.0,
            reverse_steps: 1,
        }
    }
}

impl DmOptions {
    pub fn with_mode(mode: ScheduleMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }
}

/// Per-channel state of the detector: schedule and channel inverse.
#[derive(Debug, Clone)]
pub struct DmDetector {
    schedule: DiffusionSchedule,
    h_inv: RealMatrix,
    d: usize,
    steps: usize,
}

impl DmDetector {
    pub fn new(ch: &LinearChannel, c: &Constellation, opts: &DmOptions) -> Result<Self> {
        if opts.reverse_steps == 0 {
            return Err(Error::ConfigInvalid("reverse_steps must be at least 1".into()));
        }
        let p_s = signal_power_per_dim(ch, c);
        let schedule = DiffusionSchedule::matched(ch.sigma2(), p_s, opts.mode)?
            .perturbed(opts.perturb_t_pct, opts.perturb_alpha_pct);
        Ok(Self {
            schedule,
            h_inv: ch.h().inverse()?,
            d: ch.d(),
            steps: opts.reverse_steps,
        })
    }

    pub fn schedule(&self) -> DiffusionSchedule {
        self.schedule
    }

    /// Denoised estimate of `H s`. `noise` feeds the stochastic term of
    /// multi-step reverse updates and is untouched in one-step mode.
    pub fn estimate(&self, r: &[f64], model: &dyn Denoise, noise: Option<&mut RandomStream>) -> Result<Vec<f64>> {
        if r.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: r.len(),
            });
        }
        self.estimate_batch(r, model, noise)
    }

    /// [`Self::estimate`] for concatenated received vectors.
    pub fn estimate_batch(&self, rs: &[f64], model: &dyn Denoise, noise: Option<&mut RandomStream>) -> Result<Vec<f64>> {
        if rs.is_empty() || !rs.len().is_multiple_of(self.d) {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: rs.len(),
            });
        }
        if let Some(dim) = model.input_dim().filter(|&dim| dim != self.d) {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: dim,
            });
        }
        let DiffusionSchedule { t, alpha, .. } = self.schedule;
        let mut x: Vec<f64> = rs.iter().map(|v| alpha * v).collect();
        if self.steps == 1 {
            let (h, e) = model.denoise_batch(&x, t, self.d)?;
            return Ok(reconstruct_one_step(&x, t, &h, &e));
        }
        let dt = t / self.steps as f64;
        let mut noise = noise;
        for k in 0..self.steps {
            let now = t - k as f64 * dt;
            let step = if k + 1 == self.steps { now } else { dt };
            let (h, e) = model.denoise_batch(&x, now, self.d)?;
            x = reverse_step(&x, now, step, &h, &e, noise.as_deref_mut())?;
        }
        Ok(x)
    }

    pub fn h_inv(&self) -> &RealMatrix {
        &self.h_inv
    }

    /// Decision and the denoised estimate it was made from.
    pub fn detect(
        &self,
        r: &[f64],
        c: &Constellation,
        model: &dyn Denoise,
        noise: Option<&mut RandomStream>,
    ) -> Result<(SymbolBlock, Vec<f64>)> {
        let x0_hat = self.estimate(r, model, noise)?;
        let s = self.h_inv.matvec(&x0_hat)?;
        Ok((nearest_symbol_decision(&s, c)?, x0_hat))
    }
}

/// One-step detection at the matched schedule.
pub fn detect_dm(
    r: &[f64],
    ch: &LinearChannel,
    c: &Constellation,
    model: &dyn Denoise,
    mode: ScheduleMode,
) -> Result<SymbolBlock> {
    let det = DmDetector::new(ch, c, &DmOptions::with_mode(mode))?;
    det.detect(r, c, model, None).map(|(s, _)| s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrGain {
    pub ratio: f64,
    pub db: f64,
}

/// Running sums for [`effective_snr_gain`] over many trials.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SnrGainAccumulator {
    pub signal: f64,
    pub residual: f64,
}

impl SnrGainAccumulator {
    pub fn add(&mut self, hs: &[f64], x0_hat: &[f64]) -> Result<()> {
        if hs.len() != x0_hat.len() {
            return Err(Error::LengthMismatch {
                left: hs.len(),
                right: x0_hat.len(),
            });
        }
        for (a, b) in hs.iter().zip(x0_hat) {
            self.signal += a * a;
            self.residual += (b - a) * (b - a);
        }
        Ok(())
    }

    /// `+inf` when the residual is zero.
    pub fn gain(&self) -> SnrGain {
        let ratio = if self.residual == 0.0 {
            f64::INFINITY
        } else {
            self.signal / self.residual
        };
        SnrGain {
            ratio,
            db: 10.0 * ratio.log10(),
        }
    }
}

/// `sum |Hs|^2 / sum |x0_hat - Hs|^2` over the concatenated trials.
pub fn effective_snr_gain(hs: &[f64], x0_hat: &[f64]) -> Result<SnrGain> {
    if hs.is_empty() {
        return Err(Error::LengthMismatch {
            left: 0,
            right: x0_hat.len(),
        });
    }
    let mut acc = SnrGainAccumulator::default();
    acc.add(hs, x0_hat)?;
    Ok(acc.gain())
}
