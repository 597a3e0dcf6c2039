//! Baseline detectors: exhaustive maximum likelihood and linear
//! equalize-then-slice.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::channel::LinearChannel;
use crate::error::{Error, Result};
use crate::modem::{nearest_symbol_decision, Constellation, SymbolBlock};
use crate::numerics::{mat_inverse, RealMatrix};

const ML_MAX_CANDIDATES: f64 = (1u64 << 24) as f64;

/// Exhaustive ML detector with per-position contributions precomputed.
///
/// Candidates are visited in lexicographic index order (first symbol most
/// significant) and only strictly smaller distances replace the incumbent, so
/// ties resolve to the lexicographically smallest index tuple.
#[derive(Debug, Clone)]
pub struct MlDetector {
    d: usize,
    n_symbols: usize,
    size: usize,
    // contributions[j][k] = H[:, cols of symbol j] * point k, length d
    contributions: Vec<Vec<Vec<f64>>>,
}

impl MlDetector {
    pub fn new(ch: &LinearChannel, c: &Constellation) -> Result<Self> {
        let d = ch.d();
        if !d.is_multiple_of(c.dims()) {
            return Err(Error::DimensionMismatch {
                expected: d.div_ceil(c.dims()) * c.dims(),
                got: d,
            });
        }
        let n_symbols = d / c.dims();
        let candidates = (c.size() as f64).powi(n_symbols as i32);
        if candidates > ML_MAX_CANDIDATES {
            return Err(Error::SearchSpaceTooLarge { candidates });
        }
        let h = ch.h();
        let contributions = (0..n_symbols)
            .map(|j| {
                (0..c.size())
                    .map(|k| {
                        let p = c.point(k);
                        (0..d)
                            .map(|row| {
                                p.iter()
                                    .enumerate()
                                    .map(|(m, x)| h.get(row, j * c.dims() + m) * x)
                                    .sum()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            d,
            n_symbols,
            size: c.size(),
            contributions,
        })
    }

    pub fn detect_indices(&self, r: &[f64]) -> Result<Vec<usize>> {
        if r.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: r.len(),
            });
        }
        let (n, d) = (self.n_symbols, self.d);
        let mut idx = vec![0usize; n];
        // prefix[j] holds the sum of contributions of symbols 0..j
        let mut prefix = vec![vec![0.0; d]; n + 1];
        let mut best = idx.clone();
        let mut best_dist = f64::INFINITY;
        let mut dirty_from = 0;
        loop {
            for j in dirty_from..n {
                let (lo, hi) = prefix.split_at_mut(j + 1);
                let c = &self.contributions[j][idx[j]];
                for ((out, a), b) in hi[0].iter_mut().zip(&lo[j]).zip(c) {
                    *out = a + b;
                }
            }
            let dist: f64 = r.iter().zip(&prefix[n]).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best_dist {
                best_dist = dist;
                best.copy_from_slice(&idx);
            }
            // odometer increment, last symbol fastest
            let mut j = n;
            loop {
                if j == 0 {
                    return Ok(best);
                }
                j -= 1;
                idx[j] += 1;
                if idx[j] < self.size {
                    break;
                }
                idx[j] = 0;
            }
            dirty_from = j;
        }
    }
}

pub fn detect_ml(r: &[f64], ch: &LinearChannel, c: &Constellation) -> Result<SymbolBlock> {
    let det = MlDetector::new(ch, c)?;
    Ok(SymbolBlock::from_indices(c, det.detect_indices(r)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Equalizer {
    Zf,
    Mmse,
    Mf,
}

impl fmt::Display for Equalizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Equalizer::Zf => "zf",
            Equalizer::Mmse => "mmse",
            Equalizer::Mf => "mf",
        })
    }
}

impl FromStr for Equalizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zf" => Ok(Equalizer::Zf),
            "mmse" => Ok(Equalizer::Mmse),
            "mf" => Ok(Equalizer::Mf),
            _ => Err(Error::ConfigInvalid(format!("unknown equalizer `{s}`"))),
        }
    }
}

/// Precomputed linear filter `W`; detection is `slice(W r)`.
#[derive(Debug, Clone)]
pub struct LinearDetector {
    kind: Equalizer,
    w: RealMatrix,
}

impl LinearDetector {
    pub fn new(ch: &LinearChannel, kind: Equalizer) -> Result<Self> {
        let h = ch.h();
        let w = match kind {
            Equalizer::Zf => mat_inverse(h)?,
            Equalizer::Mf => h.transpose(),
            Equalizer::Mmse => {
                let ht = h.transpose();
                let gram = ht.matmul(h)?.add_scaled_identity(ch.sigma2())?;
                mat_inverse(&gram)?.matmul(&ht)?
            }
        };
        Ok(Self { kind, w })
    }

    pub fn kind(&self) -> Equalizer {
        self.kind
    }

    pub fn equalize(&self, r: &[f64]) -> Result<Vec<f64>> {
        self.w.matvec(r)
    }

    pub fn detect(&self, r: &[f64], c: &Constellation) -> Result<SymbolBlock> {
        nearest_symbol_decision(&self.equalize(r)?, c)
    }
}

pub fn detect_linear(r: &[f64], ch: &LinearChannel, c: &Constellation, kind: Equalizer) -> Result<SymbolBlock> {
    LinearDetector::new(ch, kind)?.detect(r, c)
}
