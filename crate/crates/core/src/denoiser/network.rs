//! Transformer denoiser with timestep-modulated blocks and hand-written
//! backward pass.
//!
//! Shapes: a batch of `B` inputs of length `d` is viewed as `R = B * n_tokens`
//! rows of `token_len` values. Every activation is a row-major `R x width`
//! buffer; per-sample quantities (conditioning, modulation) are `B x width`.
//!
//! Block (pre-norm, modulation applied to each sub-layer output):
//!
//! ```text
//! x1 = x  + mod1(Attn(LN(x)))      mod(z) = z * (1 + zeta) + kappa
//! x2 = x1 + mod2(MLP(LN(x1)))      [zeta1, kappa1, zeta2, kappa2] = u W_mod
//! ```
//!
//! `u` is the conditioning vector: `silu(MLP(sinusoidal(t)))` or, in the
//! linear mode, the scalar `t` itself.

use serde::{Deserialize, Serialize};

use super::params::{Init, ParamSet, Registry};
use crate::error::{Error, Result};
use crate::numerics::RandomStream;

const LN_EPS: f64 = 1e-6;
const TIME_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// Sinusoidal frequency embedding followed by a two-layer SiLU MLP.
    #[default]
    Sinusoidal,
    /// `zeta = W t`, `kappa = W' t` with no embedding.
    Linear,
}

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Real values per token.
    pub token_len: usize,
    pub n_tokens: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    /// Shared trunk blocks.
    pub depth: usize,
    /// Blocks in each of the two output heads.
    pub head_depth: usize,
    pub t_embed_dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub conditioning: Conditioning,
}

impl ModelConfig {
    /// Default desk-scale architecture: one token per symbol.
    pub fn desk(n_symbols: usize, dims_per_symbol: usize) -> Self {
        Self {
            token_len: dims_per_symbol,
            n_tokens: n_symbols,
            model_dim: 64,
            n_heads: 4,
            depth: 4,
            head_depth: 1,
            t_embed_dim: 64,
            mlp_ratio: 4,
            conditioning: Conditioning::Sinusoidal,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.token_len * self.n_tokens
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_ratio * self.model_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("token_len", self.token_len),
            ("n_tokens", self.n_tokens),
            ("model_dim", self.model_dim),
            ("n_heads", self.n_heads),
            ("depth", self.depth),
            ("head_depth", self.head_depth),
            ("t_embed_dim", self.t_embed_dim),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if !self.t_embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig("t_embed_dim must be even".into()));
        }
        Ok(())
    }
}

pub fn tokenize(x: &[f64], token_len: usize) -> Vec<Vec<f64>> {
    x.chunks(token_len).map(<[f64]>::to_vec).collect()
}

pub fn untokenize(tokens: &[Vec<f64>]) -> Vec<f64> {
    tokens.iter().flatten().copied().collect()
}

/// Operation tally for one forward pass, in floating-point operations
/// (a multiply-add counts as two).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCount {
    /// Score and value products inside self-attention.
    pub attention: u64,
    /// Everything done through dense projections.
    pub dense: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BlockIds {
    modw: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct HeadIds {
    blocks: Vec<BlockIds>,
    out_w: usize,
    out_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct TembIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    embed_w: usize,
    embed_b: usize,
    pos: usize,
    temb: Option<TembIds>,
    trunk: Vec<BlockIds>,
    heads: [HeadIds; 2],
    cond_dim: usize,
}

impl Layout {
    fn register(cfg: &ModelConfig, reg: &mut Registry) -> Layout {
        let (dm, l, n, e, m) = (
            cfg.model_dim,
            cfg.token_len,
            cfg.n_tokens,
            cfg.t_embed_dim,
            cfg.hidden_dim(),
        );
        let embed_w = reg.add("embed.w".into(), vec![l, dm], Init::FanIn(l));
        let embed_b = reg.add("embed.b".into(), vec![dm], Init::Zero);
        let pos = reg.add("pos".into(), vec![n, dm], Init::Zero);
        let (temb, cond_dim) = match cfg.conditioning {
            Conditioning::Sinusoidal => (
                Some(TembIds {
                    w1: reg.add("temb.w1".into(), vec![e, dm], Init::FanIn(e)),
                    b1: reg.add("temb.b1".into(), vec![dm], Init::Zero),
                    w2: reg.add("temb.w2".into(), vec![dm, dm], Init::FanIn(dm)),
                    b2: reg.add("temb.b2".into(), vec![dm], Init::Zero),
                }),
                dm,
            ),
            Conditioning::Linear => (None, 1),
        };
        let block = |prefix: String, reg: &mut Registry| BlockIds {
            modw: reg.add(format!("{prefix}.mod.w"), vec![cond_dim, 4 * dm], Init::Zero),
            wq: reg.add(format!("{prefix}.attn.wq"), vec![dm, dm], Init::FanIn(dm)),
            wk: reg.add(format!("{prefix}.attn.wk"), vec![dm, dm], Init::FanIn(dm)),
            wv: reg.add(format!("{prefix}.attn.wv"), vec![dm, dm], Init::FanIn(dm)),
            wo: reg.add(format!("{prefix}.attn.wo"), vec![dm, dm], Init::FanIn(dm)),
            bo: reg.add(format!("{prefix}.attn.bo"), vec![dm], Init::Zero),
            w1: reg.add(format!("{prefix}.mlp.w1"), vec![dm, m], Init::FanIn(dm)),
            b1: reg.add(format!("{prefix}.mlp.b1"), vec![m], Init::Zero),
            w2: reg.add(format!("{prefix}.mlp.w2"), vec![m, dm], Init::FanIn(m)),
            b2: reg.add(format!("{prefix}.mlp.b2"), vec![dm], Init::Zero),
        };
        let trunk = (0..cfg.depth).map(|i| block(format!("trunk.{i}"), reg)).collect();
        let head = |name: &str, reg: &mut Registry| HeadIds {
            blocks: (0..cfg.head_depth)
                .map(|i| block(format!("{name}.{i}"), reg))
                .collect(),
            out_w: reg.add(format!("{name}.out.w"), vec![dm, l], Init::FanIn(dm)),
            out_b: reg.add(format!("{name}.out.b"), vec![l], Init::Zero),
        };
        let heads = [head("head_h", reg), head("head_eps", reg)];
        Layout {
            embed_w,
            embed_b,
            pos,
            temb,
            trunk,
            heads,
            cond_dim,
        }
    }
}

/// `c = op(a) * op(b) + beta * c` with `a` logically `m x k`, `b` `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn linear(x: &[f64], rows: usize, w: &[f64], b: Option<&[f64]>, inp: usize, out: usize, flops: &mut FlopCount) -> Vec<f64> {
    let mut y = vec![0.0; rows * out];
    gemm(rows, inp, out, x, false, w, false, &mut y, 0.0);
    if let Some(b) = b {
        for row in y.chunks_exact_mut(out) {
            row.iter_mut().zip(b).for_each(|(y, b)| *y += b);
        }
    }
    flops.dense += 2 * (rows * inp * out) as u64;
    y
}

/// Accumulates `dW += x^T dy`, `db += colsum(dy)`; returns `dx = dy W^T`.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    w: &[f64],
    inp: usize,
    out: usize,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    want_dx: bool,
) -> Vec<f64> {
    gemm(inp, rows, out, x, true, dy, false, dw, 1.0);
    if let Some(db) = db {
        for row in dy.chunks_exact(out) {
            db.iter_mut().zip(row).for_each(|(b, g)| *b += g);
        }
    }
    if !want_dx {
        return Vec::new();
    }
    let mut dx = vec![0.0; rows * inp];
    gemm(rows, out, inp, dy, false, w, true, &mut dx, 0.0);
    dx
}

fn layer_norm(x: &[f64], width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(x.len() / width);
    for (xr, yr) in x.chunks_exact(width).zip(y.chunks_exact_mut(width)) {
        let mean = xr.iter().sum::<f64>() / width as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        yr.iter_mut().zip(xr).for_each(|(y, x)| *y = (x - mean) * r);
        rstd.push(r);
    }
    (y, rstd)
}

fn layer_norm_backward(dy: &[f64], y: &[f64], rstd: &[f64], width: usize) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    for (((dyr, yr), dxr), r) in dy
        .chunks_exact(width)
        .zip(y.chunks_exact(width))
        .zip(dx.chunks_exact_mut(width))
        .zip(rstd)
    {
        let mean_dy = dyr.iter().sum::<f64>() / width as f64;
        let mean_dyy = dyr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / width as f64;
        for ((dx, dy), y) in dxr.iter_mut().zip(dyr).zip(yr) {
            *dx = r * (dy - mean_dy - y * mean_dyy);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

/// GELU (tanh form) of `x`, with the inner tanh kept for the backward pass.
fn gelu(x: f64) -> (f64, f64) {
    let th = tanh(GELU_C * (x + GELU_A * x * x * x));
    (0.5 * x * (1.0 + th), th)
}

fn gelu_grad(x: f64, th: f64) -> f64 {
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `[cos(1000 t f_k) ..., sin(1000 t f_k) ...]` with geometric `f_k`.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * k as f64 / half as f64);
        let arg = TIME_SCALE * t * freq;
        out[k] = libm::cos(arg);
        out[half + k] = libm::sin(arg);
    }
    out
}

/// Multi-head scaled dot-product self-attention within each sample.
///
/// Returns the attended values and the row-stochastic attention weights laid
/// out as `[batch][head][query][key]`.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    batch: usize,
    n: usize,
    heads: usize,
    flops: &mut FlopCount,
) -> (Vec<f64>, Vec<f64>) {
    let dm = q.len() / (batch * n);
    let dh = dm / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    let mut probs = vec![0.0; batch * heads * n * n];
    for b in 0..batch {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..n {
                let qi = &q[(b * n + i) * dm + col..][..dh];
                let p = &mut probs[((b * heads + h) * n + i) * n..][..n];
                let mut max = f64::NEG_INFINITY;
                for (j, pj) in p.iter_mut().enumerate() {
                    let kj = &k[(b * n + j) * dm + col..][..dh];
                    *pj = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    max = max.max(*pj);
                }
                let mut total = 0.0;
                for pj in p.iter_mut() {
                    *pj = (*pj - max).exp();
                    total += *pj;
                }
                p.iter_mut().for_each(|pj| *pj /= total);
                let oi = &mut out[(b * n + i) * dm + col..][..dh];
                for (j, pj) in p.iter().enumerate() {
                    let vj = &v[(b * n + j) * dm + col..][..dh];
                    oi.iter_mut().zip(vj).for_each(|(o, v)| *o += pj * v);
                }
            }
        }
    }
    flops.attention += 4 * (batch * heads * n * n * dh) as u64;
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    d_out: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    batch: usize,
    n: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dm = q.len() / (batch * n);
    let dh = dm / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; n];
    for b in 0..batch {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..n {
                let p = &probs[((b * heads + h) * n + i) * n..][..n];
                let doi = &d_out[(b * n + i) * dm + col..][..dh];
                for j in 0..n {
                    let row = (b * n + j) * dm + col;
                    dp[j] = doi.iter().zip(&v[row..row + dh]).map(|(a, b)| a * b).sum();
                    dv[row..row + dh]
                        .iter_mut()
                        .zip(doi)
                        .for_each(|(g, d)| *g += p[j] * d);
                }
                let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qrow = (b * n + i) * dm + col;
                for j in 0..n {
                    let ds = scale * p[j] * (dp[j] - inner);
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = (b * n + j) * dm + col;
                    for c in 0..dh {
                        dq[qrow + c] += ds * k[krow + c];
                        dk[krow + c] += ds * q[qrow + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[derive(Debug, Clone)]
struct CondCache {
    phi: Vec<f64>,
    a1: Vec<f64>,
    s1: Vec<f64>,
    c: Vec<f64>,
    u: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    a: Vec<f64>,
    rstd_a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    z: Vec<f64>,
    bn: Vec<f64>,
    rstd_b: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    gelu_th: Vec<f64>,
    mo: Vec<f64>,
    modv: Vec<f64>,
}

#[derive(Debug, Clone)]
struct HeadCache {
    blocks: Vec<BlockCache>,
    f: Vec<f64>,
    rstd: Vec<f64>,
}

/// Activations saved by [`DenoiserModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    tokens: Vec<f64>,
    cond: CondCache,
    trunk: Vec<BlockCache>,
    heads: Vec<HeadCache>,
}

/// Network outputs for a batch, each `batch * d` long.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub h_hat: Vec<f64>,
    pub eps_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

/// Fresh model with fan-in scaled Gaussian weights and zeroed biases,
/// positional embeddings and modulation maps.
pub fn init_model(cfg: &ModelConfig, stream: &mut RandomStream) -> Result<DenoiserModel> {
    cfg.validate()?;
    let mut reg = Registry::default();
    let layout = Layout::register(cfg, &mut reg);
    reg.initialize(stream);
    Ok(DenoiserModel {
        config: cfg.clone(),
        params: reg.params,
        layout,
    })
}

impl DenoiserModel {
    /// A model with the given config and externally supplied tensors, which
    /// must match the config's layout exactly.
    pub fn from_params(cfg: &ModelConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let mut reg = Registry::default();
        let layout = Layout::register(cfg, &mut reg);
        reg.params.check_same_layout(&params)?;
        Ok(Self {
            config: cfg.clone(),
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    fn p(&self, id: usize) -> &[f64] {
        &self.params.tensors[id].data
    }

    /// `(h_hat, eps_hat)` for a single input.
    pub fn predict(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.predict_batch(x, &[t])?;
        Ok((out.h_hat, out.eps_hat))
    }

    pub fn predict_batch(&self, xs: &[f64], ts: &[f64]) -> Result<Prediction> {
        let mut flops = FlopCount::default();
        self.forward(xs, ts, &mut flops).map(|(p, _)| p)
    }

    pub fn predict_with_flops(&self, x: &[f64], t: f64) -> Result<(Prediction, FlopCount)> {
        let mut flops = FlopCount::default();
        let (p, _) = self.forward(x, &[t], &mut flops)?;
        Ok((p, flops))
    }

    fn check_inputs(&self, xs: &[f64], ts: &[f64]) -> Result<()> {
        let d = self.input_dim();
        if ts.is_empty() || xs.len() != ts.len() * d {
            return Err(Error::DimensionMismatch {
                expected: ts.len().max(1) * d,
                got: xs.len(),
            });
        }
        if let Some(t) = ts.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::InvalidConfig(format!("timestep {t} outside (0, 1]")));
        }
        Ok(())
    }

    pub fn forward(&self, xs: &[f64], ts: &[f64], flops: &mut FlopCount) -> Result<(Prediction, ForwardCache)> {
        self.check_inputs(xs, ts)?;
        let cfg = &self.config;
        let (batch, n, l, dm) = (ts.len(), cfg.n_tokens, cfg.token_len, cfg.model_dim);
        let rows = batch * n;
        let lay = &self.layout;

        let tokens = xs.to_vec();
        let mut x = linear(&tokens, rows, self.p(lay.embed_w), Some(self.p(lay.embed_b)), l, dm, flops);
        let pos = self.p(lay.pos);
        for (r, row) in x.chunks_exact_mut(dm).enumerate() {
            let pr = &pos[(r % n) * dm..][..dm];
            row.iter_mut().zip(pr).for_each(|(a, b)| *a += b);
        }

        let cond = self.cond_forward(ts, flops);
        let mut trunk = Vec::with_capacity(lay.trunk.len());
        for ids in &lay.trunk {
            let (out, cache) = self.block_forward(ids, x, &cond.u, batch, flops);
            trunk.push(cache);
            x = out;
        }

        let mut outputs = Vec::with_capacity(2);
        let mut heads = Vec::with_capacity(2);
        for head in &lay.heads {
            let mut y = x.clone();
            let mut blocks = Vec::with_capacity(head.blocks.len());
            for ids in &head.blocks {
                let (out, cache) = self.block_forward(ids, y, &cond.u, batch, flops);
                blocks.push(cache);
                y = out;
            }
            let (f, rstd) = layer_norm(&y, dm);
            outputs.push(linear(&f, rows, self.p(head.out_w), Some(self.p(head.out_b)), dm, l, flops));
            heads.push(HeadCache { blocks, f, rstd });
        }
        let eps_hat = outputs.pop().unwrap_or_default();
        let h_hat = outputs.pop().unwrap_or_default();
        Ok((
            Prediction { h_hat, eps_hat },
            ForwardCache {
                batch,
                tokens,
                cond,
                trunk,
                heads,
            },
        ))
    }

    fn cond_forward(&self, ts: &[f64], flops: &mut FlopCount) -> CondCache {
        let batch = ts.len();
        match &self.layout.temb {
            None => CondCache {
                phi: Vec::new(),
                a1: Vec::new(),
                s1: Vec::new(),
                c: Vec::new(),
                u: ts.to_vec(),
            },
            Some(ids) => {
                let (e, dm) = (self.config.t_embed_dim, self.config.model_dim);
                let phi: Vec<f64> = ts.iter().flat_map(|&t| timestep_embedding(t, e)).collect();
                let a1 = linear(&phi, batch, self.p(ids.w1), Some(self.p(ids.b1)), e, dm, flops);
                let s1: Vec<f64> = a1.iter().map(|&v| silu(v)).collect();
                let c = linear(&s1, batch, self.p(ids.w2), Some(self.p(ids.b2)), dm, dm, flops);
                let u = c.iter().map(|&v| silu(v)).collect();
                CondCache { phi, a1, s1, c, u }
            }
        }
    }

    fn block_forward(
        &self,
        ids: &BlockIds,
        x_in: Vec<f64>,
        u: &[f64],
        batch: usize,
        flops: &mut FlopCount,
    ) -> (Vec<f64>, BlockCache) {
        let cfg = &self.config;
        let (n, dm, m, cd) = (cfg.n_tokens, cfg.model_dim, cfg.hidden_dim(), self.layout.cond_dim);
        let rows = batch * n;
        let modv = linear(u, batch, self.p(ids.modw), None, cd, 4 * dm, flops);
        let (a, rstd_a) = layer_norm(&x_in, dm);
        let q = linear(&a, rows, self.p(ids.wq), None, dm, dm, flops);
        let k = linear(&a, rows, self.p(ids.wk), None, dm, dm, flops);
        let v = linear(&a, rows, self.p(ids.wv), None, dm, dm, flops);
        let (o, probs) = attention_forward(&q, &k, &v, batch, n, cfg.n_heads, flops);
        let z = linear(&o, rows, self.p(ids.wo), Some(self.p(ids.bo)), dm, dm, flops);
        let mut x1 = x_in;
        modulate_add(&mut x1, &z, &modv, n, dm, 0);

        let (bn, rstd_b) = layer_norm(&x1, dm);
        let pre = linear(&bn, rows, self.p(ids.w1), Some(self.p(ids.b1)), dm, m, flops);
        let mut act = vec![0.0; pre.len()];
        let mut gelu_th = vec![0.0; pre.len()];
        for ((y, th), &v) in act.iter_mut().zip(gelu_th.iter_mut()).zip(&pre) {
            (*y, *th) = gelu(v);
        }
        let mo = linear(&act, rows, self.p(ids.w2), Some(self.p(ids.b2)), m, dm, flops);
        let mut x2 = x1;
        modulate_add(&mut x2, &mo, &modv, n, dm, 2);

        (
            x2,
            BlockCache {
                a,
                rstd_a,
                q,
                k,
                v,
                probs,
                o,
                z,
                bn,
                rstd_b,
                pre,
                act,
                gelu_th,
                mo,
                modv,
            },
        )
    }

    /// Accumulates into `grads` the gradient of `sum(d_h * h_hat) +
    /// sum(d_eps * eps_hat)` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, d_h: &[f64], d_eps: &[f64], grads: &mut ParamSet) {
        let cfg = &self.config;
        let lay = &self.layout;
        let (batch, n, l, dm) = (cache.batch, cfg.n_tokens, cfg.token_len, cfg.model_dim);
        let rows = batch * n;
        let mut du = vec![0.0; batch * lay.cond_dim];
        let mut dx = vec![0.0; rows * dm];

        for ((head, hc), d_out) in lay.heads.iter().zip(&cache.heads).zip([d_h, d_eps]) {
            let df = linear_backward(
                &hc.f,
                d_out,
                rows,
                self.p(head.out_w),
                dm,
                l,
                &mut grads.tensors[head.out_w].data,
                None,
                true,
            );
            accumulate_colsum(&mut grads.tensors[head.out_b].data, d_out, l);
            let mut dy = layer_norm_backward(&df, &hc.f, &hc.rstd, dm);
            for (ids, bc) in head.blocks.iter().zip(&hc.blocks).rev() {
                dy = self.block_backward(ids, bc, dy, &cache.cond.u, &mut du, batch, grads);
            }
            dx.iter_mut().zip(&dy).for_each(|(a, b)| *a += b);
        }

        for (ids, bc) in lay.trunk.iter().zip(&cache.trunk).rev() {
            dx = self.block_backward(ids, bc, dx, &cache.cond.u, &mut du, batch, grads);
        }

        let dpos = &mut grads.tensors[lay.pos].data;
        for (r, row) in dx.chunks_exact(dm).enumerate() {
            dpos[(r % n) * dm..][..dm]
                .iter_mut()
                .zip(row)
                .for_each(|(a, b)| *a += b);
        }
        accumulate_colsum(&mut grads.tensors[lay.embed_b].data, &dx, dm);
        gemm(l, rows, dm, &cache.tokens, true, &dx, false, &mut grads.tensors[lay.embed_w].data, 1.0);

        if let Some(ids) = &lay.temb {
            let (e, cond) = (cfg.t_embed_dim, &cache.cond);
            let dc: Vec<f64> = du.iter().zip(&cond.c).map(|(g, c)| g * silu_grad(*c)).collect();
            accumulate_colsum(&mut grads.tensors[ids.b2].data, &dc, dm);
            let ds1 = linear_backward(&cond.s1, &dc, batch, self.p(ids.w2), dm, dm, &mut grads.tensors[ids.w2].data, None, true);
            let da1: Vec<f64> = ds1.iter().zip(&cond.a1).map(|(g, a)| g * silu_grad(*a)).collect();
            accumulate_colsum(&mut grads.tensors[ids.b1].data, &da1, dm);
            linear_backward(&cond.phi, &da1, batch, self.p(ids.w1), e, dm, &mut grads.tensors[ids.w1].data, None, false);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        ids: &BlockIds,
        bc: &BlockCache,
        dx2: Vec<f64>,
        u: &[f64],
        du: &mut [f64],
        batch: usize,
        grads: &mut ParamSet,
    ) -> Vec<f64> {
        let cfg = &self.config;
        let (n, dm, m, cd) = (cfg.n_tokens, cfg.model_dim, cfg.hidden_dim(), self.layout.cond_dim);
        let rows = batch * n;
        let mut dmod = vec![0.0; batch * 4 * dm];

        // MLP sub-layer
        let dmo = modulate_backward(&dx2, &bc.mo, &bc.modv, &mut dmod, n, dm, 2);
        accumulate_colsum(&mut grads.tensors[ids.b2].data, &dmo, dm);
        let dact = linear_backward(&bc.act, &dmo, rows, self.p(ids.w2), m, dm, &mut grads.tensors[ids.w2].data, None, true);
        let dpre: Vec<f64> = dact
            .iter()
            .zip(bc.pre.iter().zip(&bc.gelu_th))
            .map(|(g, (p, th))| g * gelu_grad(*p, *th))
            .collect();
        accumulate_colsum(&mut grads.tensors[ids.b1].data, &dpre, m);
        let dbn = linear_backward(&bc.bn, &dpre, rows, self.p(ids.w1), dm, m, &mut grads.tensors[ids.w1].data, None, true);
        let mut dx1 = dx2;
        let ln_b = layer_norm_backward(&dbn, &bc.bn, &bc.rstd_b, dm);
        dx1.iter_mut().zip(&ln_b).for_each(|(a, b)| *a += b);

        // attention sub-layer
        let dz = modulate_backward(&dx1, &bc.z, &bc.modv, &mut dmod, n, dm, 0);
        accumulate_colsum(&mut grads.tensors[ids.bo].data, &dz, dm);
        let dout = linear_backward(&bc.o, &dz, rows, self.p(ids.wo), dm, dm, &mut grads.tensors[ids.wo].data, None, true);
        let (dq, dk, dv) = attention_backward(&dout, &bc.q, &bc.k, &bc.v, &bc.probs, batch, n, cfg.n_heads);
        let mut da = linear_backward(&bc.a, &dq, rows, self.p(ids.wq), dm, dm, &mut grads.tensors[ids.wq].data, None, true);
        let dak = linear_backward(&bc.a, &dk, rows, self.p(ids.wk), dm, dm, &mut grads.tensors[ids.wk].data, None, true);
        let dav = linear_backward(&bc.a, &dv, rows, self.p(ids.wv), dm, dm, &mut grads.tensors[ids.wv].data, None, true);
        for ((a, b), c) in da.iter_mut().zip(&dak).zip(&dav) {
            *a += b + c;
        }
        let ln_a = layer_norm_backward(&da, &bc.a, &bc.rstd_a, dm);
        let mut dx = dx1;
        dx.iter_mut().zip(&ln_a).for_each(|(a, b)| *a += b);

        // modulation map
        let du_block = linear_backward(u, &dmod, batch, self.p(ids.modw), cd, 4 * dm, &mut grads.tensors[ids.modw].data, None, true);
        du.iter_mut().zip(&du_block).for_each(|(a, b)| *a += b);
        dx
    }
}

/// `x += z * (1 + zeta) + kappa` using modulation pair `pair` (0 or 2).
fn modulate_add(x: &mut [f64], z: &[f64], modv: &[f64], n: usize, dm: usize, pair: usize) {
    for (r, (xr, zr)) in x.chunks_exact_mut(dm).zip(z.chunks_exact(dm)).enumerate() {
        let m = &modv[(r / n) * 4 * dm..][..4 * dm];
        let (zeta, kappa) = (&m[pair * dm..][..dm], &m[(pair + 1) * dm..][..dm]);
        for j in 0..dm {
            xr[j] += zr[j] * (1.0 + zeta[j]) + kappa[j];
        }
    }
}

/// Returns `dz` and accumulates `dzeta`, `dkappa` into `dmod`.
fn modulate_backward(dy: &[f64], z: &[f64], modv: &[f64], dmod: &mut [f64], n: usize, dm: usize, pair: usize) -> Vec<f64> {
    let mut dz = vec![0.0; dy.len()];
    for (r, ((dyr, zr), dzr)) in dy
        .chunks_exact(dm)
        .zip(z.chunks_exact(dm))
        .zip(dz.chunks_exact_mut(dm))
        .enumerate()
    {
        let base = (r / n) * 4 * dm;
        let zeta = &modv[base + pair * dm..][..dm];
        for j in 0..dm {
            dzr[j] = dyr[j] * (1.0 + zeta[j]);
            dmod[base + pair * dm + j] += dyr[j] * zr[j];
            dmod[base + (pair + 1) * dm + j] += dyr[j];
        }
    }
    dz
}

fn accumulate_colsum(acc: &mut [f64], m: &[f64], width: usize) {
    for row in m.chunks_exact(width) {
        acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_vector, make_stream};

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            token_len: 2,
            n_tokens: 3,
            model_dim: 8,
            n_heads: 2,
            depth: 2,
            head_depth: 1,
            t_embed_dim: 8,
            mlp_ratio: 2,
            conditioning: Conditioning::Sinusoidal,
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.n_heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let mut cfg = small_config();
        cfg.depth = 0;
        assert!(cfg.validate().is_err());
        assert!(init_model(&cfg, &mut make_stream(0, 0)).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small_config();
        let a = init_model(&cfg, &mut make_stream(4, 1)).unwrap();
        let b = init_model(&cfg, &mut make_stream(4, 1)).unwrap();
        assert_eq!(a, b);
        let c = init_model(&cfg, &mut make_stream(5, 1)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn output_shapes_and_timestep_independence_at_init() {
        let cfg = small_config();
        let model = init_model(&cfg, &mut make_stream(4, 1)).unwrap();
        let x = gaussian_vector(&mut make_stream(1, 0), cfg.input_dim(), 1.0);
        let (h1, e1) = model.predict(&x, 0.1).unwrap();
        let (h9, e9) = model.predict(&x, 0.9).unwrap();
        assert_eq!(h1.len(), 6);
        assert_eq!(e1.len(), 6);
        assert_eq!(h1, h9);
        assert_eq!(e1, e9);
        assert!(matches!(model.predict(&x[..5], 0.5), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn single_token_attention_returns_values() {
        let mut flops = FlopCount::default();
        let q = [0.3, -1.0, 2.0, 0.5];
        let k = [1.0, 2.0, -0.5, 0.1];
        let v = [4.0, -3.0, 0.25, 9.0];
        let (out, probs) = attention_forward(&q, &k, &v, 1, 1, 2, &mut flops);
        assert_eq!(out, v.to_vec());
        assert_eq!(probs, vec![1.0, 1.0]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut s = make_stream(2, 2);
        let (batch, n, heads, dm) = (3, 5, 2, 8);
        let q = gaussian_vector(&mut s, batch * n * dm, 2.0);
        let k = gaussian_vector(&mut s, batch * n * dm, 2.0);
        let v = gaussian_vector(&mut s, batch * n * dm, 1.0);
        let (_, probs) = attention_forward(&q, &k, &v, batch, n, heads, &mut FlopCount::default());
        for row in probs.chunks_exact(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_tokens_give_equal_outputs() {
        let cfg = ModelConfig {
            token_len: 1,
            n_tokens: 6,
            ..small_config()
        };
        let model = init_model(&cfg, &mut make_stream(8, 1)).unwrap();
        let (h, e) = model.predict(&[0.7; 6], 0.4).unwrap();
        for w in h.windows(2).chain(e.windows(2)) {
            assert!((w[0] - w[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn outputs_finite_for_large_inputs() {
        let cfg = small_config();
        let model = init_model(&cfg, &mut make_stream(8, 1)).unwrap();
        let x = gaussian_vector(&mut make_stream(3, 0), cfg.input_dim(), 400.0);
        let (h, e) = model.predict(&x, 0.5).unwrap();
        assert!(h.iter().chain(&e).all(|v| v.is_finite()));
    }

    #[test]
    fn tokenize_round_trip() {
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let toks = tokenize(&x, 3);
        assert_eq!(toks.len(), 4);
        assert_eq!(untokenize(&toks), x);
    }

    #[test]
    fn batch_matches_single() {
        let cfg = small_config();
        let model = init_model(&cfg, &mut make_stream(8, 1)).unwrap();
        let xs = gaussian_vector(&mut make_stream(3, 0), 2 * cfg.input_dim(), 1.0);
        let both = model.predict_batch(&xs, &[0.2, 0.7]).unwrap();
        let (h0, _) = model.predict(&xs[..6], 0.2).unwrap();
        let (_, e1) = model.predict(&xs[6..], 0.7).unwrap();
        for (a, b) in both.h_hat[..6].iter().zip(&h0) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in both.eps_hat[6..].iter().zip(&e1) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_flops_scale_quadratically() {
        let count = |n: usize| {
            let cfg = ModelConfig {
                token_len: 1,
                n_tokens: n,
                model_dim: 16,
                n_heads: 2,
                depth: 1,
                head_depth: 1,
                t_embed_dim: 8,
                mlp_ratio: 2,
                conditioning: Conditioning::Sinusoidal,
            };
            let model = init_model(&cfg, &mut make_stream(1, 1)).unwrap();
            model.predict_with_flops(&vec![0.1; n], 0.5).unwrap().1.attention
        };
        let ratio = count(128) as f64 / count(64) as f64;
        assert!((3.6..=4.4).contains(&ratio), "{ratio}");
    }
}
