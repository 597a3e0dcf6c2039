//! Forward diffusion `x_t = (1 - t) x0 + sqrt(t) eps`, SNR-matched timestep
//! selection, received-signal scaling, and reverse reconstruction.
//!
//! The drift `h` is constant `-x0` over `[0, t]`, and the noise target is the
//! realized scaled noise `sqrt(t) eps`, so one reverse step of size `t` with
//! exact targets returns `x0` exactly.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RandomStream;

/// Smallest timestep handed out by [`timestep_from_channel`].
pub const MIN_TIMESTEP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    /// Exact root in (0, 1] of `(1 - t)^2 P_x0 / t = P_s / sigma2`.
    #[default]
    Corrected,
    /// Closed form with denominator 4, for general powers.
    LiteralGeneral,
    /// Unit-power closed form with denominator `4 sigma2`.
    LiteralUnitPower,
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleMode::Corrected => "corrected",
            ScheduleMode::LiteralGeneral => "literal-general",
            ScheduleMode::LiteralUnitPower => "literal-unit-power",
        })
    }
}

impl FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corrected" => Ok(ScheduleMode::Corrected),
            "literal-general" => Ok(ScheduleMode::LiteralGeneral),
            "literal-unit-power" => Ok(ScheduleMode::LiteralUnitPower),
            _ => Err(Error::ConfigInvalid(format!("unknown schedule mode `{s}`"))),
        }
    }
}

fn check_positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidPower(format!("{name} must be positive and finite, got {x}")))
    }
}

/// Smaller root of `t^2 - (2 + rho) t + 1 = 0`, written as `1 / larger root`
/// to avoid cancellation when `rho` is large.
fn matched_root(rho: f64) -> f64 {
    2.0 / (2.0 + rho + (rho * (rho + 4.0)).sqrt())
}

/// Timestep whose signal-to-noise proportion matches the channel's.
///
/// `p_s` is the per-dimension power of `H s`, `p_x0` the per-dimension power
/// of the training data `x0` (equal to `p_s` when training on `x0 = H s`).
pub fn timestep_from_channel(sigma2: f64, p_s: f64, p_x0: f64, mode: ScheduleMode) -> Result<f64> {
    check_positive("sigma2", sigma2)?;
    check_positive("P_s", p_s)?;
    check_positive("P_x0", p_x0)?;
    let t = match mode {
        ScheduleMode::Corrected => matched_root(p_s / (sigma2 * p_x0)),
        // (2 + rho - sqrt(rho (rho + 4))) / 4
        ScheduleMode::LiteralGeneral => 0.5 * matched_root(p_s / (sigma2 * p_x0)),
        // (2 sigma2 + 1 - sqrt(1 + 4 sigma2)) / (4 sigma2)
        ScheduleMode::LiteralUnitPower => 0.5 * matched_root(1.0 / sigma2),
    };
    Ok(t.clamp(MIN_TIMESTEP, 1.0))
}

/// Factor mapping the received signal onto the marginal of `x_t`.
pub fn scaling_factor(t: f64, p_s: f64, sigma2: f64) -> Result<f64> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidPower(format!("timestep {t} outside (0, 1]")));
    }
    check_positive("P_s", p_s)?;
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidPower(format!("sigma2 must be non-negative, got {sigma2}")));
    }
    Ok((((1.0 - t).powi(2) * p_s + t) / (p_s + sigma2)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub t: f64,
    pub alpha: f64,
    pub mode: ScheduleMode,
}

impl DiffusionSchedule {
    /// Schedule for a channel with noise `sigma2` and signal power `p_s`,
    /// assuming the model was trained on `x0 = H s`.
    pub fn matched(sigma2: f64, p_s: f64, mode: ScheduleMode) -> Result<Self> {
        let t = timestep_from_channel(sigma2, p_s, p_s, mode)?;
        let alpha = scaling_factor(t, p_s, sigma2)?;
        Ok(Self { t, alpha, mode })
    }

    /// Scale `t` and `alpha` by `(1 + pct / 100)`; `t` stays inside (0, 1].
    pub fn perturbed(&self, t_pct: f64, alpha_pct: f64) -> Self {
        Self {
            t: (self.t * (1.0 + t_pct / 100.0)).clamp(MIN_TIMESTEP, 1.0),
            alpha: self.alpha * (1.0 + alpha_pct / 100.0),
            mode: self.mode,
        }
    }
}

/// A sample from the forward process together with its regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionPoint {
    pub x_t: Vec<f64>,
    pub t: f64,
    /// Drift target, `-x0`.
    pub h: Vec<f64>,
    /// Realized scaled noise, `sqrt(t) eps`.
    pub eps_scaled: Vec<f64>,
}

/// Forward diffusion with explicit unit noise `eps`.
pub fn diffuse_with_noise(x0: &[f64], t: f64, eps: &[f64]) -> DiffusionPoint {
    let st = t.sqrt();
    let eps_scaled: Vec<f64> = eps.iter().map(|e| st * e).collect();
    let x_t = x0.iter().zip(&eps_scaled).map(|(x, e)| (1.0 - t) * x + e).collect();
    DiffusionPoint {
        x_t,
        t,
        h: x0.iter().map(|x| -x).collect(),
        eps_scaled,
    }
}

pub fn forward_diffuse(x0: &[f64], t: f64, stream: &mut RandomStream) -> DiffusionPoint {
    let eps: Vec<f64> = (0..x0.len()).map(|_| stream.next_standard_normal()).collect();
    diffuse_with_noise(x0, t, &eps)
}

/// One reverse step of size `t`: `x0_hat = x_t - t h_hat - eps_hat`.
pub fn reconstruct_one_step(x_t: &[f64], t: f64, h_hat: &[f64], eps_hat: &[f64]) -> Vec<f64> {
    x_t.iter()
        .zip(h_hat)
        .zip(eps_hat)
        .map(|((x, h), e)| x - t * h - e)
        .collect()
}

/// `x_{t-dt} = x_t - dt h_hat - (dt / t) eps_hat + sqrt(dt (t - dt) / t) eps~`.
///
/// With `noise = None` the stochastic term is dropped (mean update).
pub fn reverse_step(
    x_t: &[f64],
    t: f64,
    dt: f64,
    h_hat: &[f64],
    eps_hat: &[f64],
    noise: Option<&mut RandomStream>,
) -> Result<Vec<f64>> {
    if !(dt > 0.0 && dt <= t && t <= 1.0) {
        return Err(Error::InvalidStep { t, dt });
    }
    let ratio = dt / t;
    let mut out: Vec<f64> = x_t
        .iter()
        .zip(h_hat)
        .zip(eps_hat)
        .map(|((x, h), e)| x - dt * h - ratio * e)
        .collect();
    if let Some(stream) = noise {
        let std = (dt * (t - dt) / t).sqrt();
        for v in out.iter_mut() {
            *v += std * stream.next_standard_normal();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::make_stream;
    use proptest::prelude::*;

    fn corrected(sigma2: f64) -> f64 {
        timestep_from_channel(sigma2, 1.0, 1.0, ScheduleMode::Corrected).unwrap()
    }

    #[test]
    fn golden_timesteps() {
        let golden = (3.0 - 5f64.sqrt()) / 2.0;
        assert!((corrected(1.0) - golden).abs() < 1e-12);
        assert!(((1.0 - golden).powi(2) / golden - 1.0).abs() < 1e-12);
        let t = corrected(0.25);
        assert!((t - 0.1715729).abs() < 1e-7);
        assert!((0.25 * (1.0 - t).powi(2) - t).abs() < 1e-12);
        let lit = timestep_from_channel(1.0, 1.0, 1.0, ScheduleMode::LiteralUnitPower).unwrap();
        assert!((lit - (3.0 - 5f64.sqrt()) / 4.0).abs() < 1e-12);
        assert!((lit - 0.1909830).abs() < 1e-7);
    }

    #[test]
    fn literal_general_formula() {
        for (sigma2, p_s, p_x0) in [(1.0, 1.0, 1.0), (0.3, 2.0, 1.5), (4.0, 0.5, 0.5)] {
            let rho: f64 = p_s / (sigma2 * p_x0);
            let printed = (2.0 + rho - (rho * (rho + 4.0)).sqrt()) / 4.0;
            let t = timestep_from_channel(sigma2, p_s, p_x0, ScheduleMode::LiteralGeneral).unwrap();
            assert!((t - printed).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_powers() {
        assert!(timestep_from_channel(0.0, 1.0, 1.0, ScheduleMode::Corrected).is_err());
        assert!(timestep_from_channel(1.0, -1.0, 1.0, ScheduleMode::Corrected).is_err());
        assert!(timestep_from_channel(1.0, 1.0, 0.0, ScheduleMode::Corrected).is_err());
        assert!(scaling_factor(0.0, 1.0, 1.0).is_err());
        assert!(scaling_factor(0.5, 0.0, 1.0).is_err());
        assert!(scaling_factor(0.5, 1.0, -1.0).is_err());
    }

    #[test]
    fn scaling_examples() {
        let t = corrected(1.0);
        let a = scaling_factor(t, 1.0, 1.0).unwrap();
        assert!((a - 0.6180340).abs() < 1e-7);
        assert!((a - (1.0 - t)).abs() < 1e-12);

        let t = 0.6275;
        let sigma2 = t / (1.0f64 - t).powi(2);
        assert!((sigma2 - 4.522319).abs() < 1e-6);
        let a = scaling_factor(t, 1.0, sigma2).unwrap();
        assert!((a - 0.37250).abs() < 1e-5);

        assert!((scaling_factor(1e-12, 1.0, 0.0).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn limits() {
        assert!(corrected(1e6) > 0.998);
        let t = corrected(1e-6);
        assert!((t / 1e-6 - 1.0).abs() < 1e-5);
    }

    #[test]
    fn forward_examples() {
        let p = diffuse_with_noise(&[1.0, -1.0], 0.25, &[0.5, 0.2]);
        assert!((p.x_t[0] - 1.0).abs() < 1e-15 && (p.x_t[1] + 0.65).abs() < 1e-15);
        assert_eq!(p.h, vec![-1.0, 1.0]);
        assert!((p.eps_scaled[0] - 0.25).abs() < 1e-15 && (p.eps_scaled[1] - 0.1).abs() < 1e-15);

        let eps = [0.3, -2.0];
        let pure = diffuse_with_noise(&[1.0, -1.0], 1.0, &eps);
        assert_eq!(pure.x_t, eps.to_vec());

        let tiny = diffuse_with_noise(&[1.0, -1.0], 1e-14, &eps);
        assert!((tiny.x_t[0] - 1.0).abs() < 1e-6 && tiny.eps_scaled[1].abs() < 1e-6);
    }

    #[test]
    fn reconstruct_examples() {
        let x0 = reconstruct_one_step(&[1.0, -0.65], 0.25, &[-1.0, 1.0], &[0.25, 0.1]);
        assert!((x0[0] - 1.0).abs() < 1e-15 && (x0[1] + 1.0).abs() < 1e-15);
        assert_eq!(reconstruct_one_step(&[0.3, 0.4], 0.7, &[0.0, 0.0], &[0.0, 0.0]), vec![0.3, 0.4]);
    }

    #[test]
    fn reverse_step_examples() {
        let p = diffuse_with_noise(&[1.0, -1.0], 0.25, &[0.5, 0.2]);
        let x = reverse_step(&p.x_t, 0.25, 0.1, &p.h, &p.eps_scaled, None).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] + 0.79).abs() < 1e-15);
        let alt = [0.85 + 0.15 / 0.5 * 0.5, -0.85 + 0.15 / 0.5 * 0.2];
        assert!((x[0] - alt[0]).abs() < 1e-15 && (x[1] - alt[1]).abs() < 1e-15);

        let full = reverse_step(&p.x_t, 0.25, 0.25, &p.h, &p.eps_scaled, None).unwrap();
        assert_eq!(full, reconstruct_one_step(&p.x_t, 0.25, &p.h, &p.eps_scaled));

        assert!(matches!(
            reverse_step(&p.x_t, 0.25, 0.3, &p.h, &p.eps_scaled, None),
            Err(Error::InvalidStep { .. })
        ));
    }

    #[test]
    fn reverse_step_noise_variance() {
        let (t, dt) = (0.6, 0.2);
        let mut s = make_stream(8, 0);
        let n = 1_000_000;
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..n {
            let p = forward_diffuse(&[0.0], t, &mut s);
            let x = reverse_step(&p.x_t, t, dt, &p.h, &p.eps_scaled, Some(&mut s)).unwrap();
            sum += x[0];
            sum2 += x[0] * x[0];
        }
        let var = sum2 / n as f64 - (sum / n as f64).powi(2);
        let target = t - dt;
        // variance estimator std for Gaussian data: target * sqrt(2 / n)
        let tol = 3.0 * target * (2.0 / n as f64).sqrt();
        assert!((var - target).abs() < tol, "{var} vs {target}");
    }

    proptest! {
        #[test]
        fn corrected_schedule_identities(log_sigma2 in -4.0f64..4.0, p_s in 0.1f64..10.0) {
            let sigma2 = 10f64.powf(log_sigma2);
            let s = DiffusionSchedule::matched(sigma2, p_s, ScheduleMode::Corrected).unwrap();
            prop_assert!(s.t > 0.0 && s.t <= 1.0);
            prop_assert!((s.alpha - (1.0 - s.t)).abs() < 1e-12);
            prop_assert!((sigma2 * (1.0 - s.t).powi(2) - s.t).abs() < 1e-12);
        }

        #[test]
        fn timestep_decreases_with_snr(a in -3.0f64..3.0, b in -3.0f64..3.0) {
            prop_assume!((a - b).abs() > 1e-6);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            // larger sigma2 means lower SNR and a larger timestep
            prop_assert!(corrected(10f64.powf(hi)) > corrected(10f64.powf(lo)));
        }

        #[test]
        fn one_step_inverts_forward(x0 in proptest::collection::vec(-3.0f64..3.0, 1..8), t in 1e-6f64..1.0, seed in 0u64..1000) {
            let p = forward_diffuse(&x0, t, &mut make_stream(seed, 0));
            let back = reconstruct_one_step(&p.x_t, t, &p.h, &p.eps_scaled);
            for (a, b) in back.iter().zip(&x0) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn chained_mean_steps_match_one_step(
            x0 in proptest::collection::vec(-3.0f64..3.0, 1..6),
            t in 0.01f64..1.0,
            cuts in proptest::collection::vec(0.0f64..1.0, 0..6),
            seed in 0u64..1000,
        ) {
            let p = forward_diffuse(&x0, t, &mut make_stream(seed, 0));
            let mut grid: Vec<f64> = cuts.iter().map(|c| c * t).filter(|&c| c > 1e-9 && c < t - 1e-9).collect();
            grid.push(0.0);
            grid.push(t);
            grid.sort_by(|a, b| b.partial_cmp(a).unwrap());
            grid.dedup();
            let mut x = p.x_t.clone();
            for w in grid.windows(2) {
                let (cur, next) = (w[0], w[1]);
                // exact targets at the current time: h = -x0, eps = noise part of x
                let eps: Vec<f64> = x.iter().zip(&x0).map(|(xi, x0i)| xi - (1.0 - cur) * x0i).collect();
                x = reverse_step(&x, cur, cur - next, &p.h, &eps, None).unwrap();
            }
            let one = reconstruct_one_step(&p.x_t, t, &p.h, &p.eps_scaled);
            for (a, b) in x.iter().zip(&one) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
