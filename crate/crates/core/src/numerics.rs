//! Seeded random streams, small dense matrices, and the complex to
//! real-equivalent embedding.
//!
//! Uniform draws come from the Philox4x32-10 counter-based generator keyed by
//! the seed, with the substream id occupying the upper half of the 128-bit
//! counter. Two streams with different substream ids therefore walk disjoint
//! counter ranges and can never produce the same block. Gaussian variates use
//! the Marsaglia polar method on top of that, with `libm` transcendental
//! functions so results do not depend on the platform's libc.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with ten rounds.
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, c[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

/// A deterministic, splittable stream of random draws.
///
/// The sequence is a pure function of `(seed, substream)`. `position` counts
/// 64-bit draws consumed so far.
#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    substream: u64,
    position: u64,
    block: Option<(u64, [u32; 4])>,
    spare_normal: Option<f64>,
}

pub fn make_stream(seed: u64, substream: u64) -> RandomStream {
    RandomStream::new(seed, substream)
}

impl RandomStream {
    pub fn new(seed: u64, substream: u64) -> Self {
        Self {
            seed,
            substream,
            position: 0,
            block: None,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn substream(&self) -> u64 {
        self.substream
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    /// A new independent stream derived from this one's seed.
    pub fn split(&self, substream: u64) -> RandomStream {
        RandomStream::new(self.seed, substream)
    }

    pub fn next_u64(&mut self) -> u64 {
        let block_idx = self.position >> 1;
        let words = match self.block {
            Some((idx, words)) if idx == block_idx => words,
            _ => {
                let counter = [
                    block_idx as u32,
                    (block_idx >> 32) as u32,
                    self.substream as u32,
                    (self.substream >> 32) as u32,
                ];
                let key = [self.seed as u32, (self.seed >> 32) as u32];
                let words = philox4x32_10(counter, key);
                self.block = Some((block_idx, words));
                words
            }
        };
        let half = (self.position & 1) as usize * 2;
        self.position += 1;
        (u64::from(words[half + 1]) << 32) | u64::from(words[half])
    }

    /// Uniform on the open interval (0, 1) with 53 bits of resolution.
    pub fn next_uniform(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        ((self.next_u64() >> 11) as f64 + 0.5) * SCALE
    }

    /// Uniform integer in `0..2^bits`, taken from the high bits of one draw.
    pub fn next_bits(&mut self, bits: u32) -> u64 {
        if bits == 0 {
            return 0;
        }
        self.next_u64() >> (64 - bits)
    }

    pub fn next_standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.next_uniform() - 1.0;
            let v = 2.0 * self.next_uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let factor = libm::sqrt(-2.0 * libm::log(s) / s);
                self.spare_normal = Some(v * factor);
                return u * factor;
            }
        }
    }
}

/// `n` independent draws from N(0, std^2).
pub fn gaussian_vector(stream: &mut RandomStream, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * stream.next_standard_normal()).collect()
}

/// Dense row-major matrix of finite `f64` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

const PIVOT_THRESHOLD: f64 = 1e-12;

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ConfigInvalid("matrix dimensions must be positive".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::ConfigInvalid("matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { rows: n, cols: n, data }
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::identity(n);
        for (i, &x) in diag.iter().enumerate() {
            m.data[i * n + i] = x;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.get(r, c);
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                got: v.len(),
            });
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn matmul(&self, other: &RealMatrix) -> Result<RealMatrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut data = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                let out = &mut data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(RealMatrix {
            rows: self.rows,
            cols: other.cols,
            data,
        })
    }

    pub fn add_scaled_identity(&self, lambda: f64) -> Result<RealMatrix> {
        if !self.is_square() {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                got: self.cols,
            });
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            out.data[i * self.cols + i] += lambda;
        }
        Ok(out)
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Max absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn inverse(&self) -> Result<RealMatrix> {
        mat_inverse(self)
    }
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn mat_inverse(m: &RealMatrix) -> Result<RealMatrix> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch {
            expected: m.rows,
            got: m.cols,
        });
    }
    let n = m.rows;
    let mut a = m.data.clone();
    let mut inv = RealMatrix::identity(n).data;
    for col in 0..n {
        let (pivot_row, pivot_abs) = (col..n)
            .map(|r| (r, a[r * n + col].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot_abs < PIVOT_THRESHOLD {
            return Err(Error::SingularMatrix { pivot: pivot_abs });
        }
        if pivot_row != col {
            for c in 0..n {
                a.swap(pivot_row * n + c, col * n + c);
                inv.swap(pivot_row * n + c, col * n + c);
            }
        }
        let p = a[col * n + col];
        for c in 0..n {
            a[col * n + c] /= p;
            inv[col * n + c] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col];
            if f == 0.0 {
                continue;
            }
            for c in 0..n {
                a[r * n + c] -= f * a[col * n + c];
                inv[r * n + c] -= f * inv[col * n + c];
            }
        }
    }
    Ok(RealMatrix {
        rows: n,
        cols: n,
        data: inv,
    })
}

/// Embeds a row-major complex matrix as `[[Re, -Im], [Im, Re]]`.
pub fn complex_to_real_equivalent(rows: usize, cols: usize, entries: &[Complex64]) -> Result<RealMatrix> {
    if entries.len() != rows * cols {
        return Err(Error::DimensionMismatch {
            expected: rows * cols,
            got: entries.len(),
        });
    }
    let (r2, c2) = (2 * rows, 2 * cols);
    let mut data = vec![0.0; r2 * c2];
    for i in 0..rows {
        for j in 0..cols {
            let z = entries[i * cols + j];
            data[i * c2 + j] = z.re;
            data[i * c2 + cols + j] = -z.im;
            data[(rows + i) * c2 + j] = z.im;
            data[(rows + i) * c2 + cols + j] = z.re;
        }
    }
    RealMatrix::new(r2, c2, data)
}

/// Complex vector to stacked `[Re; Im]`.
pub fn stack_complex(v: &[Complex64]) -> Vec<f64> {
    v.iter().map(|z| z.re).chain(v.iter().map(|z| z.im)).collect()
}

pub fn unstack_complex(v: &[f64]) -> Vec<Complex64> {
    let m = v.len() / 2;
    (0..m).map(|i| Complex64::new(v[i], v[m + i])).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}
