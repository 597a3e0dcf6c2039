//! Constellations, symbol sampling, hard decisions and error counting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RandomStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Bpsk,
    Qam4,
    Qam16,
    Qam64,
}

impl Scheme {
    /// Real coordinates per symbol: 1 for BPSK, 2 (I and Q) otherwise.
    pub fn real_dims(self) -> usize {
        match self {
            Scheme::Bpsk => 1,
            _ => 2,
        }
    }

    pub fn bits_per_symbol(self) -> u32 {
        match self {
            Scheme::Bpsk => 1,
            Scheme::Qam4 => 2,
            Scheme::Qam16 => 4,
            Scheme::Qam64 => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Bpsk => "bpsk",
            Scheme::Qam4 => "qam4",
            Scheme::Qam16 => "qam16",
            Scheme::Qam64 => "qam64",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bpsk" => Ok(Scheme::Bpsk),
            "qam4" | "4qam" | "qpsk" => Ok(Scheme::Qam4),
            "qam16" | "16qam" => Ok(Scheme::Qam16),
            "qam64" | "64qam" => Ok(Scheme::Qam64),
            other => Err(Error::UnsupportedScheme(other.to_string())),
        }
    }
}

/// A finite symbol alphabet with bit labels.
///
/// `points` is flat: point `k` occupies `points[k * dims..(k + 1) * dims]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    scheme: Option<Scheme>,
    dims: usize,
    bits_per_symbol: u32,
    points: Vec<f64>,
    labels: Vec<u32>,
}

fn gray(k: u32) -> u32 {
    k ^ (k >> 1)
}

pub fn build_constellation(scheme: Scheme) -> Constellation {
    match scheme {
        Scheme::Bpsk => Constellation {
            scheme: Some(scheme),
            dims: 1,
            bits_per_symbol: 1,
            points: vec![1.0, -1.0],
            labels: vec![0, 1],
        },
        _ => {
            let bits = scheme.bits_per_symbol();
            let axis_bits = bits / 2;
            let levels = 1u32 << axis_bits;
            let amplitude = |k: u32| f64::from(2 * k as i32 - levels as i32 + 1);
            let mut points = Vec::with_capacity(2 << bits);
            let mut labels = Vec::with_capacity(1 << bits);
            for i in 0..levels {
                for q in 0..levels {
                    points.push(amplitude(i));
                    points.push(amplitude(q));
                    labels.push((gray(i) << axis_bits) | gray(q));
                }
            }
            let energy = points.iter().map(|x| x * x).sum::<f64>() / f64::from(1u32 << bits);
            let scale = energy.sqrt().recip();
            points.iter_mut().for_each(|x| *x *= scale);
            Constellation {
                scheme: Some(scheme),
                dims: 2,
                bits_per_symbol: bits,
                points,
                labels,
            }
        }
    }
}

impl Constellation {
    /// An arbitrary alphabet. Energies are taken as given, not normalized.
    pub fn custom(dims: usize, points: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        if dims == 0 || points.is_empty() || !points.len().is_multiple_of(dims) {
            return Err(Error::ConfigInvalid("constellation points do not tile `dims`".into()));
        }
        let size = points.len() / dims;
        if !size.is_power_of_two() || labels.len() != size {
            return Err(Error::ConfigInvalid(
                "constellation size must be a power of two with one label per point".into(),
            ));
        }
        Ok(Self {
            scheme: None,
            dims,
            bits_per_symbol: size.trailing_zeros(),
            points,
            labels,
        })
    }

    pub fn scheme(&self) -> Option<Scheme> {
        self.scheme
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn bits_per_symbol(&self) -> u32 {
        self.bits_per_symbol
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.points[k * self.dims..(k + 1) * self.dims]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn label(&self, k: usize) -> u32 {
        self.labels[k]
    }

    /// Mean of `|p|^2` over the alphabet (energy per symbol).
    pub fn mean_energy(&self) -> f64 {
        self.points.iter().map(|x| x * x).sum::<f64>() / self.size() as f64
    }

    /// Mean energy per real coordinate.
    pub fn energy_per_dim(&self) -> f64 {
        self.mean_energy() / self.dims as f64
    }

    /// Index of the closest point; ties go to the lowest index.
    pub fn nearest_index(&self, v: &[f64]) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for k in 0..self.size() {
            let d: f64 = self.point(k).iter().zip(v).map(|(p, x)| (p - x) * (p - x)).sum();
            if d < best_dist {
                best_dist = d;
                best = k;
            }
        }
        best
    }
}

/// Transmitted (or decided) symbols with their concatenated coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolBlock {
    pub indices: Vec<usize>,
    pub coords: Vec<f64>,
}

impl SymbolBlock {
    pub fn from_indices(c: &Constellation, indices: Vec<usize>) -> Self {
        let coords = indices.iter().flat_map(|&k| c.point(k).iter().copied()).collect();
        Self { indices, coords }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// I.i.d. uniform symbols.
pub fn sample_symbols(c: &Constellation, n: usize, stream: &mut RandomStream) -> SymbolBlock {
    let bits = c.bits_per_symbol();
    let indices = (0..n).map(|_| stream.next_bits(bits) as usize).collect();
    SymbolBlock::from_indices(c, indices)
}

pub fn nearest_symbol_decision(v: &[f64], c: &Constellation) -> Result<SymbolBlock> {
    if !v.len().is_multiple_of(c.dims()) {
        return Err(Error::DimensionMismatch {
            expected: v.len().div_ceil(c.dims()) * c.dims(),
            got: v.len(),
        });
    }
    let indices = v.chunks_exact(c.dims()).map(|chunk| c.nearest_index(chunk)).collect();
    Ok(SymbolBlock::from_indices(c, indices))
}

/// Raw error tallies; add them up across trials and divide at the end.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ErrorCounts {
    pub symbols: u64,
    pub symbol_errors: u64,
    pub bits: u64,
    pub bit_errors: u64,
}

impl ErrorCounts {
    pub fn ser(&self) -> f64 {
        if self.symbols == 0 {
            0.0
        } else {
            self.symbol_errors as f64 / self.symbols as f64
        }
    }

    pub fn ber(&self) -> f64 {
        if self.bits == 0 {
            0.0
        } else {
            self.bit_errors as f64 / self.bits as f64
        }
    }
}

impl std::ops::AddAssign for ErrorCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.symbols += rhs.symbols;
        self.symbol_errors += rhs.symbol_errors;
        self.bits += rhs.bits;
        self.bit_errors += rhs.bit_errors;
    }
}

pub fn count_errors(truth: &SymbolBlock, decided: &SymbolBlock, c: &Constellation) -> Result<ErrorCounts> {
    if truth.len() != decided.len() {
        return Err(Error::LengthMismatch {
            left: truth.len(),
            right: decided.len(),
        });
    }
    let mut counts = ErrorCounts {
        symbols: truth.len() as u64,
        bits: truth.len() as u64 * u64::from(c.bits_per_symbol()),
        ..Default::default()
    };
    for (&a, &b) in truth.indices.iter().zip(&decided.indices) {
        if a != b {
            counts.symbol_errors += 1;
            counts.bit_errors += u64::from((c.label(a) ^ c.label(b)).count_ones());
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRates {
    pub ser: f64,
    pub ber: f64,
}

pub fn error_rates(truth: &SymbolBlock, decided: &SymbolBlock, c: &Constellation) -> Result<ErrorRates> {
    let counts = count_errors(truth, decided, c)?;
    Ok(ErrorRates {
        ser: counts.ser(),
        ber: counts.ber(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::make_stream;
    use proptest::prelude::*;

    const ALL: [Scheme; 4] = [Scheme::Bpsk, Scheme::Qam4, Scheme::Qam16, Scheme::Qam64];

    #[test]
    fn bpsk_points() {
        let c = build_constellation(Scheme::Bpsk);
        assert_eq!(c.points(), &[1.0, -1.0]);
    }

    #[test]
    fn qam4_and_qam16_points() {
        let c = build_constellation(Scheme::Qam4);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        for k in 0..4 {
            for x in c.point(k) {
                assert!((x.abs() - h).abs() < 1e-15);
            }
        }
        let c = build_constellation(Scheme::Qam16);
        let s = 10f64.sqrt();
        for k in 0..16 {
            for x in c.point(k) {
                let a = (x * s).abs();
                assert!((a - 1.0).abs() < 1e-12 || (a - 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constellation_invariants() {
        for scheme in ALL {
            let c = build_constellation(scheme);
            assert_eq!(c.size(), 1 << c.bits_per_symbol());
            assert!((c.mean_energy() - 1.0).abs() < 1e-12, "{scheme}");
            let mut labels: Vec<_> = (0..c.size()).map(|k| c.label(k)).collect();
            labels.sort_unstable();
            labels.dedup();
            assert_eq!(labels.len(), c.size());
            // nearest neighbours are Gray-adjacent
            let dmin = (0..c.size())
                .flat_map(|a| (0..c.size()).filter(move |&b| b != a).map(move |b| (a, b)))
                .map(|(a, b)| dist2(c.point(a), c.point(b)))
                .fold(f64::INFINITY, f64::min);
            assert!(dmin > 0.0);
            for a in 0..c.size() {
                for b in 0..c.size() {
                    if a != b && (dist2(c.point(a), c.point(b)) - dmin).abs() < 1e-9 {
                        assert_eq!((c.label(a) ^ c.label(b)).count_ones(), 1);
                    }
                }
            }
        }
    }

    fn dist2(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    #[test]
    fn unsupported_scheme() {
        assert!(matches!("qam256".parse::<Scheme>(), Err(Error::UnsupportedScheme(_))));
        assert_eq!("QAM16".parse::<Scheme>().unwrap(), Scheme::Qam16);
    }

    #[test]
    fn bpsk_frequency() {
        let c = build_constellation(Scheme::Bpsk);
        let mut s = make_stream(21, 0);
        let n = 1_000_000;
        let block = sample_symbols(&c, n, &mut s);
        let plus = block.indices.iter().filter(|&&k| k == 0).count() as f64 / n as f64;
        assert!((plus - 0.5).abs() < 0.0015, "{plus}");
    }

    #[test]
    fn qam4_frequency() {
        let c = build_constellation(Scheme::Qam4);
        let mut s = make_stream(22, 0);
        let n = 1_000_000;
        let block = sample_symbols(&c, n, &mut s);
        let mut hist = [0usize; 4];
        block.indices.iter().for_each(|&k| hist[k] += 1);
        for h in hist {
            assert!((h as f64 / n as f64 - 0.25).abs() < 0.0013);
        }
        assert_eq!(block.coords.len(), 2 * n);
    }

    #[test]
    fn sampling_is_deterministic() {
        let c = build_constellation(Scheme::Qam16);
        let a = sample_symbols(&c, 3, &mut make_stream(4, 4));
        let b = sample_symbols(&c, 3, &mut make_stream(4, 4));
        assert_eq!(a, b);
    }

    #[test]
    fn decision_examples() {
        let bpsk = build_constellation(Scheme::Bpsk);
        assert_eq!(nearest_symbol_decision(&[0.3, -1.2], &bpsk).unwrap().coords, vec![1.0, -1.0]);
        assert_eq!(nearest_symbol_decision(&[0.0], &bpsk).unwrap().coords, vec![1.0]);
        let qam4 = build_constellation(Scheme::Qam4);
        let d = nearest_symbol_decision(&[0.4, -0.2], &qam4).unwrap();
        assert!((d.coords[0] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((d.coords[1] + 0.5f64.sqrt()).abs() < 1e-15);
        assert!(matches!(
            nearest_symbol_decision(&[0.1, 0.2, 0.3], &qam4),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn error_rate_examples() {
        let bpsk = build_constellation(Scheme::Bpsk);
        let a = SymbolBlock::from_indices(&bpsk, vec![0, 1, 0]);
        let r = error_rates(&a, &a, &bpsk).unwrap();
        assert_eq!((r.ser, r.ber), (0.0, 0.0));
        let flipped = SymbolBlock::from_indices(&bpsk, vec![1, 0, 1]);
        let r = error_rates(&a, &flipped, &bpsk).unwrap();
        assert_eq!((r.ser, r.ber), (1.0, 1.0));

        let qam4 = build_constellation(Scheme::Qam4);
        let truth_idx = (0..4).find(|&k| qam4.label(k) == 0b00).unwrap();
        let dec_idx = (0..4).find(|&k| qam4.label(k) == 0b01).unwrap();
        assert!((dist2(qam4.point(truth_idx), qam4.point(dec_idx)) - 2.0).abs() < 1e-12);
        let r = error_rates(
            &SymbolBlock::from_indices(&qam4, vec![truth_idx]),
            &SymbolBlock::from_indices(&qam4, vec![dec_idx]),
            &qam4,
        )
        .unwrap();
        assert_eq!((r.ser, r.ber), (1.0, 0.5));

        let short = SymbolBlock::from_indices(&bpsk, vec![0]);
        assert!(matches!(error_rates(&a, &short, &bpsk), Err(Error::LengthMismatch { .. })));
    }

    proptest! {
        #[test]
        fn bpsk_decision_scale_invariant(v in proptest::collection::vec(-5.0f64..5.0, 1..8), k in 0.01f64..100.0) {
            let c = build_constellation(Scheme::Bpsk);
            let scaled: Vec<f64> = v.iter().map(|x| k * x).collect();
            prop_assert_eq!(
                nearest_symbol_decision(&v, &c).unwrap().indices,
                nearest_symbol_decision(&scaled, &c).unwrap().indices
            );
        }

        #[test]
        fn points_decide_to_themselves(scheme_idx in 0usize..4, k in 0usize..64) {
            let c = build_constellation(ALL[scheme_idx]);
            let k = k % c.size();
            prop_assert_eq!(nearest_symbol_decision(c.point(k), &c).unwrap().indices, vec![k]);
        }

        #[test]
        fn ser_at_least_ber(scheme_idx in 0usize..4, seed in 0u64..1000) {
            let c = build_constellation(ALL[scheme_idx]);
            let mut s = make_stream(seed, 0);
            let a = sample_symbols(&c, 16, &mut s);
            let b = sample_symbols(&c, 16, &mut s);
            let r = error_rates(&a, &b, &c).unwrap();
            prop_assert!(r.ser >= r.ber);
        }
    }
}
