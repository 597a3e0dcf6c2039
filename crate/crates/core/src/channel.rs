//! Known linear channel `r = H s + n` and SNR bookkeeping.
//!
//! SNR throughout is per real dimension: average signal power per real
//! coordinate of `H s` divided by the per-coordinate noise variance.

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modem::{Constellation, SymbolBlock};
use crate::numerics::{complex_to_real_equivalent, RandomStream, RealMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearChannel {
    h: RealMatrix,
    sigma2: f64,
}

impl LinearChannel {
    pub fn new(h: RealMatrix, sigma2: f64) -> Result<Self> {
        if !h.is_square() {
            return Err(Error::DimensionMismatch {
                expected: h.rows(),
                got: h.cols(),
            });
        }
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidPower(format!("noise variance {sigma2}")));
        }
        Ok(Self { h, sigma2 })
    }

    pub fn identity(d: usize, sigma2: f64) -> Result<Self> {
        Self::new(RealMatrix::identity(d), sigma2)
    }

    pub fn h(&self) -> &RealMatrix {
        &self.h
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn d(&self) -> usize {
        self.h.rows()
    }

    pub fn with_sigma2(&self, sigma2: f64) -> Result<Self> {
        Self::new(self.h.clone(), sigma2)
    }

    /// `H x` without noise.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.h.matvec(x)
    }

    pub fn transmit(&self, s: &SymbolBlock, stream: &mut RandomStream) -> Result<Vec<f64>> {
        self.transmit_coords(&s.coords, stream)
    }

    pub fn transmit_coords(&self, coords: &[f64], stream: &mut RandomStream) -> Result<Vec<f64>> {
        let mut r = self.h.matvec(coords)?;
        let std = self.sigma2.sqrt();
        for x in r.iter_mut() {
            *x += std * stream.next_standard_normal();
        }
        Ok(r)
    }
}

/// Average per-dimension power of `H s` for i.i.d. symbols from `c`.
pub fn signal_power_per_dim(ch: &LinearChannel, c: &Constellation) -> f64 {
    ch.h().frobenius_norm_sq() * c.energy_per_dim() / ch.d() as f64
}

/// Noise variance giving `snr_db` against per-dimension power `p_s`.
pub fn sigma2_from_snr(snr_db: f64, p_s: f64) -> Result<f64> {
    if !(p_s > 0.0 && p_s.is_finite()) {
        return Err(Error::InvalidPower(format!("signal power {p_s}")));
    }
    Ok(p_s / 10f64.powf(snr_db / 10.0))
}

pub fn snr_db_from_sigma2(sigma2: f64, p_s: f64) -> f64 {
    10.0 * (p_s / sigma2).log10()
}

/// On-disk channel matrix: row-major, complex entries as `[re, im]` pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelFile {
    pub rows: usize,
    pub cols: usize,
    #[serde(default)]
    pub complex: bool,
    pub entries: ChannelEntries,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChannelEntries {
    Real(Vec<f64>),
    Complex(Vec<[f64; 2]>),
}

impl ChannelFile {
    /// Real-equivalent matrix described by this file.
    pub fn to_matrix(&self) -> Result<RealMatrix> {
        if self.rows != self.cols {
            return Err(Error::ConfigInvalid(format!(
                "channel matrix must be square, got {}x{}",
                self.rows, self.cols
            )));
        }
        match (&self.entries, self.complex) {
            (ChannelEntries::Real(v), false) => RealMatrix::new(self.rows, self.cols, v.clone())
                .map_err(|e| Error::ConfigInvalid(format!("channel entries: {e}"))),
            (ChannelEntries::Complex(v), true) => {
                let z: Vec<Complex64> = v.iter().map(|[re, im]| Complex64::new(*re, *im)).collect();
                complex_to_real_equivalent(self.rows, self.cols, &z)
                    .map_err(|e| Error::ConfigInvalid(format!("channel entries: {e}")))
            }
            // an empty list parses as Real; accept it only to report the size mismatch
            (ChannelEntries::Real(v), true) if v.is_empty() => Err(Error::ConfigInvalid(format!(
                "expected {} complex entries, got 0",
                self.rows * self.cols
            ))),
            (_, true) => Err(Error::ConfigInvalid("complex channel needs [re, im] entry pairs".into())),
            (_, false) => Err(Error::ConfigInvalid("real channel needs scalar entries".into())),
        }
    }

    pub fn from_real(h: &RealMatrix) -> Self {
        Self {
            rows: h.rows(),
            cols: h.cols(),
            complex: false,
            entries: ChannelEntries::Real(h.data().to_vec()),
        }
    }
}

pub fn load_channel_matrix(path: &Path) -> Result<RealMatrix> {
    let text = std::fs::read_to_string(path)?;
    let file: ChannelFile = serde_json::from_str(&text)
        .map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
    file.to_matrix()
}
