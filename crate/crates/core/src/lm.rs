//! Toy decoder-only transformer with a KV cache and hand-written gradients.
//!
//! Blocks are pre-norm (scale-only RMS norm), multi-head causal attention and
//! a SiLU feed-forward layer, with residual connections and no biases. Token
//! and learned absolute position embeddings are summed at the input; a final
//! RMS norm precedes the output projection. Positions are original token
//! indices, so evicting a token never shifts the positions of the others.
//!
//! All parameters live in one flat vector. The order, which is also the
//! checkpoint order, is
//!
//! ```text
//! tok_emb   vocab x d_model
//! pos_emb   max_context x d_model
//! per layer:
//!   attn_norm d_model
//!   wq, wk, wv, wo   d_model x d_model
//!   ffn_norm  d_model
//!   w1        d_model x d_ff
//!   w2        d_ff x d_model
//! final_norm d_model
//! out       d_model x vocab
//! ```
//!
//! Matrices are row-major with shape (inputs, outputs), so a projection is
//! `x · W`. Head `h` owns columns `h * d_head .. (h + 1) * d_head` of the
//! query, key and value projections.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use faer::{Accum, MatMut, MatRef};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{LeReader, LeWriter};
use crate::cache::KvCache;
use crate::error::{NammError, Result};
use crate::eviction::{apply_update, EvictionPolicy, PolicyState, UpdateOutcome};
use crate::numerics::{dot, gemm, masked_softmax_row, sinusoidal_embedding, Matrix, Rng};
use crate::spectrogram::STRIDE;

const RMS_EPS: f64 = 1e-6;
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_context: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            d_ff: 256,
            max_context: 2048,
        }
    }
}

impl LmConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_context", self.max_context),
        ];
        for (name, v) in fields {
            if v == 0 || v > u32::MAX as usize {
                return Err(NammError::Config(format!("lm.{name} must be in 1..=u32::MAX, got {v}")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(NammError::Config(format!(
                "lm.d_model {} is not divisible by lm.n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self)
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerOffsets {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ffn_norm: usize,
    pub w1: usize,
    pub w2: usize,
}

/// Start offsets of every tensor in the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub final_norm: usize,
    pub out: usize,
    pub total: usize,
}

impl ParamLayout {
    fn new(c: &LmConfig) -> Self {
        let d = c.d_model;
        let mut at = 0;
        let mut take = |n: usize| {
            let start = at;
            at += n;
            start
        };
        let tok_emb = take(c.vocab * d);
        let pos_emb = take(c.max_context * d);
        let layers = (0..c.n_layers)
            .map(|_| LayerOffsets {
                attn_norm: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ffn_norm: take(d),
                w1: take(d * c.d_ff),
                w2: take(c.d_ff * d),
            })
            .collect();
        let final_norm = take(d);
        let out = take(d * c.vocab);
        Self {
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            out,
            total: at,
        }
    }
}

struct LayerView<'a> {
    attn_norm: &'a [f64],
    wq: &'a [f64],
    wk: &'a [f64],
    wv: &'a [f64],
    wo: &'a [f64],
    ffn_norm: &'a [f64],
    w1: &'a [f64],
    w2: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmWeights {
    config: LmConfig,
    layout: ParamLayout,
    params: Vec<f64>,
}

impl LmWeights {
    pub fn zeros(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut params = vec![0.0; layout.total];
        // Norm scales start at one so zero weights still give a finite model.
        for l in &layout.layers {
            params[l.attn_norm..l.attn_norm + config.d_model].fill(1.0);
            params[l.ffn_norm..l.ffn_norm + config.d_model].fill(1.0);
        }
        params[layout.final_norm..layout.final_norm + config.d_model].fill(1.0);
        Ok(Self { config, layout, params })
    }

    /// Gaussian init with std `1 / sqrt(fan_in)` (unit std for token
    /// embeddings); residual output projections are scaled down by
    /// `sqrt(2 * n_layers)`.
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let mut rng = Rng::new(seed);
        let d = config.d_model;
        let (sd, sf) = (1.0 / (d as f64).sqrt(), 1.0 / (config.d_ff as f64).sqrt());
        let depth = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let mut fill = |params: &mut [f64], std: f64| {
            for p in params {
                *p = rng.next_normal() * std;
            }
        };
        let l = &w.layout;
        let mut spans = vec![(l.tok_emb, config.vocab * d, 1.0)];
        for lo in &l.layers {
            spans.push((lo.wq, d * d, sd));
            spans.push((lo.wk, d * d, sd));
            spans.push((lo.wv, d * d, sd));
            spans.push((lo.wo, d * d, sd * depth));
            spans.push((lo.w1, d * config.d_ff, sd));
            spans.push((lo.w2, config.d_ff * d, sf * depth));
        }
        spans.push((l.out, d * config.vocab, sd));
        for (start, len, std) in spans {
            fill(&mut w.params[start..start + len], std);
        }
        // Positions start sinusoidal (scaled to unit variance) so that
        // relative offsets are linear maps from the first step.
        let pos_emb = w.layout.pos_emb;
        for p in 0..config.max_context {
            let row = sinusoidal_embedding(p as f64, d, 1e4)?;
            let dst = &mut w.params[pos_emb + p * d..pos_emb + (p + 1) * d];
            for (o, v) in dst.iter_mut().zip(row) {
                *o = v * std::f64::consts::SQRT_2;
            }
        }
        Ok(w)
    }

    pub fn from_params(config: LmConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if params.len() != layout.total {
            return Err(NammError::shape(format!(
                "{} parameters for a model with {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Hex SHA-256 of the checkpoint encoding.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes).expect("writing to memory");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn span(&self, start: usize, len: usize) -> &[f64] {
        &self.params[start..start + len]
    }

    fn layer(&self, l: usize) -> LayerView<'_> {
        let c = &self.config;
        let (d, f) = (c.d_model, c.d_ff);
        let o = self.layout.layers[l];
        LayerView {
            attn_norm: self.span(o.attn_norm, d),
            wq: self.span(o.wq, d * d),
            wk: self.span(o.wk, d * d),
            wv: self.span(o.wv, d * d),
            wo: self.span(o.wo, d * d),
            ffn_norm: self.span(o.ffn_norm, d),
            w1: self.span(o.w1, d * f),
            w2: self.span(o.w2, f * d),
        }
    }

    /// Checkpoint: magic "TYLM", u32 version, the six config fields as u32
    /// in declaration order, then every parameter as little-endian f64 in
    /// layout order.
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = LeWriter::new(w);
        w.bytes(b"TYLM")?;
        w.u32(CHECKPOINT_VERSION)?;
        let c = &self.config;
        for v in [c.vocab, c.d_model, c.n_heads, c.n_layers, c.d_ff, c.max_context] {
            w.u32(v as u32)?;
        }
        w.f64s(&self.params)?;
        w.into_inner().flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = LeReader::new(BufReader::new(r));
        r.magic(b"TYLM")?;
        r.expect_u32("checkpoint version", CHECKPOINT_VERSION)?;
        let at = r.offset();
        let mut f = [0usize; 6];
        for v in &mut f {
            *v = r.u32()? as usize;
        }
        let config = LmConfig {
            vocab: f[0],
            d_model: f[1],
            n_heads: f[2],
            n_layers: f[3],
            d_ff: f[4],
            max_context: f[5],
        };
        config
            .validate()
            .map_err(|e| NammError::format(at, format!("invalid model config: {e}")))?;
        let params = r.f64s(config.param_count())?;
        if !r.at_eof()? {
            return Err(NammError::format(r.offset(), "trailing bytes after parameters"));
        }
        Self::from_params(config, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

// ---------------------------------------------------------------------------
// Slice kernels.

/// `out[m×n] += a[m×k] · b[k×n]`.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let a = MatRef::from_row_major_slice(&a[..m * k], m, k);
    let b = MatRef::from_row_major_slice(&b[..k * n], k, n);
    let o = MatMut::from_row_major_slice_mut(&mut out[..m * n], m, n);
    gemm(o, Accum::Add, a, b, 1.0);
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let a = MatRef::from_row_major_slice(&a[..m * k], m, k);
    let b = MatRef::from_row_major_slice(&b[..n * k], n, k);
    let o = MatMut::from_row_major_slice_mut(&mut out[..m * n], m, n);
    gemm(o, Accum::Add, a, b.transpose(), 1.0);
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let a = MatRef::from_row_major_slice(&a[..m * k], m, k);
    let b = MatRef::from_row_major_slice(&b[..m * n], m, n);
    let o = MatMut::from_row_major_slice_mut(&mut out[..k * n], k, n);
    gemm(o, Accum::Add, a.transpose(), b, 1.0);
}

/// Columns `off..off + dh` of a row-major `rows × d` buffer.
fn head_view(buf: &[f64], rows: usize, d: usize, off: usize, dh: usize) -> MatRef<'_, f64> {
    MatRef::from_row_major_slice_with_stride(&buf[off..], rows, dh, d)
}

// `MatMut::from_row_major_slice_with_stride_mut` swaps its strides in faer
// 0.24, so go through the column-major constructor.
fn head_view_mut(buf: &mut [f64], rows: usize, d: usize, off: usize, dh: usize) -> MatMut<'_, f64> {
    MatMut::from_column_major_slice_with_stride_mut(&mut buf[off..], dh, rows, d).transpose_mut()
}

fn matmul_rows(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm_acc(a, b, &mut out, m, k, n);
    out
}

/// Row-wise `x / rms(x) * g`; returns the output and each row's `1 / rms`.
fn rms_norm(x: &[f64], g: &[f64], rows: usize) -> (Vec<f64>, Vec<f64>) {
    let d = g.len();
    let mut y = vec![0.0; rows * d];
    let mut inv = vec![0.0; rows];
    for i in 0..rows {
        let xr = &x[i * d..(i + 1) * d];
        let r = 1.0 / (dot(xr, xr) / d as f64 + RMS_EPS).sqrt();
        inv[i] = r;
        for ((o, &xv), &gv) in y[i * d..(i + 1) * d].iter_mut().zip(xr).zip(g) {
            *o = xv * r * gv;
        }
    }
    (y, inv)
}

fn rms_norm_backward(x: &[f64], inv: &[f64], g: &[f64], dy: &[f64], dx: &mut [f64], dg: &mut [f64]) {
    let d = g.len();
    for (i, &r) in inv.iter().enumerate() {
        let xr = &x[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        let mut s = 0.0;
        for k in 0..d {
            s += g[k] * dyr[k] * xr[k];
            dg[k] += dyr[k] * xr[k] * r;
        }
        let c = r * r * r * s / d as f64;
        for k in 0..d {
            dx[i * d + k] += r * g[k] * dyr[k] - xr[k] * c;
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn check_tokens(c: &LmConfig, tokens: &[u32], start: usize) -> Result<()> {
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= c.vocab) {
        return Err(NammError::invalid(format!("token id {t} outside vocab {}", c.vocab)));
    }
    let end = start + tokens.len();
    if end > c.max_context {
        return Err(NammError::ContextOverflow {
            position: end - 1,
            max_context: c.max_context,
        });
    }
    Ok(())
}

fn embed(w: &LmWeights, tokens: &[u32], start: usize) -> Vec<f64> {
    let d = w.config.d_model;
    let mut x = vec![0.0; tokens.len() * d];
    for (t, &tok) in tokens.iter().enumerate() {
        let te = w.span(w.layout.tok_emb + tok as usize * d, d);
        let pe = w.span(w.layout.pos_emb + (start + t) * d, d);
        for ((o, a), b) in x[t * d..(t + 1) * d].iter_mut().zip(te).zip(pe) {
            *o = a + b;
        }
    }
    x
}

// ---------------------------------------------------------------------------
// Monolithic forward and backward.

struct LayerActs {
    x_in: Vec<f64>,
    inv1: Vec<f64>,
    n1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per head, `T × T` with zeros above the diagonal.
    att: Vec<Vec<f64>>,
    o: Vec<f64>,
    x_mid: Vec<f64>,
    inv2: Vec<f64>,
    n2: Vec<f64>,
    u: Vec<f64>,
    a: Vec<f64>,
}

struct SeqActs {
    tokens: Vec<u32>,
    layers: Vec<LayerActs>,
    x_final: Vec<f64>,
    inv_f: Vec<f64>,
    n_f: Vec<f64>,
    logits: Vec<f64>,
}

fn forward_acts(w: &LmWeights, tokens: &[u32], attention: bool) -> Result<SeqActs> {
    let c = w.config;
    check_tokens(&c, tokens, 0)?;
    let (t_len, d, f, dh) = (tokens.len(), c.d_model, c.d_ff, c.d_head());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = embed(w, tokens, 0);
    let mut layers = Vec::with_capacity(c.n_layers);
    let mut logits_row = vec![0.0; t_len];
    for l in 0..c.n_layers {
        let lw = w.layer(l);
        let x_in = x.clone();
        let (n1, inv1) = rms_norm(&x, lw.attn_norm, t_len);
        let mut o = vec![0.0; t_len * d];
        let (mut q, mut k, mut v) = (Vec::new(), Vec::new(), Vec::new());
        let mut att = Vec::new();
        if attention {
            q = matmul_rows(&n1, lw.wq, t_len, d, d);
            k = matmul_rows(&n1, lw.wk, t_len, d, d);
            v = matmul_rows(&n1, lw.wv, t_len, d, d);
            for h in 0..c.n_heads {
                let off = h * dh;
                let mut a = vec![0.0; t_len * t_len];
                gemm(
                    MatMut::from_row_major_slice_mut(&mut a, t_len, t_len),
                    Accum::Replace,
                    head_view(&q, t_len, d, off, dh),
                    head_view(&k, t_len, d, off, dh).transpose(),
                    scale,
                );
                for i in 0..t_len {
                    let row = &mut a[i * t_len..(i + 1) * t_len];
                    logits_row[..=i].copy_from_slice(&row[..=i]);
                    masked_softmax_row(&logits_row[..=i], |_| true, &mut row[..=i]);
                    row[i + 1..].fill(0.0);
                }
                gemm(
                    head_view_mut(&mut o, t_len, d, off, dh),
                    Accum::Add,
                    MatRef::from_row_major_slice(&a, t_len, t_len),
                    head_view(&v, t_len, d, off, dh),
                    1.0,
                );
                att.push(a);
            }
            gemm_acc(&o, lw.wo, &mut x, t_len, d, d);
        }
        let x_mid = x.clone();
        let (n2, inv2) = rms_norm(&x, lw.ffn_norm, t_len);
        let u = matmul_rows(&n2, lw.w1, t_len, d, f);
        let a: Vec<f64> = u.iter().map(|&z| silu(z)).collect();
        gemm_acc(&a, lw.w2, &mut x, t_len, f, d);
        layers.push(LayerActs {
            x_in,
            inv1,
            n1,
            q,
            k,
            v,
            att,
            o,
            x_mid,
            inv2,
            n2,
            u,
            a,
        });
    }
    let (n_f, inv_f) = rms_norm(&x, w.span(w.layout.final_norm, d), t_len);
    let logits = matmul_rows(&n_f, w.span(w.layout.out, d * c.vocab), t_len, d, c.vocab);
    Ok(SeqActs {
        tokens: tokens.to_vec(),
        layers,
        x_final: x,
        inv_f,
        n_f,
        logits,
    })
}

/// Logits for every position of `tokens` (positions `0..len`), computed in
/// one pass without a cache.
pub fn forward(w: &LmWeights, tokens: &[u32]) -> Result<Matrix> {
    let acts = forward_acts(w, tokens, true)?;
    Matrix::from_vec(tokens.len(), w.config.vocab, acts.logits)
}

fn backward(w: &LmWeights, acts: &SeqActs, dlogits: &[f64], grad: &mut [f64], attention: bool) {
    let c = w.config;
    let (t_len, d, f, dh, vocab) = (acts.tokens.len(), c.d_model, c.d_ff, c.d_head(), c.vocab);
    let scale = 1.0 / (dh as f64).sqrt();
    let lay = &w.layout;

    gemm_tn_acc(&acts.n_f, dlogits, &mut grad[lay.out..lay.out + d * vocab], t_len, d, vocab);
    let mut dn = vec![0.0; t_len * d];
    gemm_nt_acc(dlogits, w.span(lay.out, d * vocab), &mut dn, t_len, vocab, d);
    let mut dx = vec![0.0; t_len * d];
    rms_norm_backward(
        &acts.x_final,
        &acts.inv_f,
        w.span(lay.final_norm, d),
        &dn,
        &mut dx,
        &mut grad[lay.final_norm..lay.final_norm + d],
    );

    for l in (0..c.n_layers).rev() {
        let lw = w.layer(l);
        let lo = lay.layers[l];
        let la = &acts.layers[l];

        // Feed-forward sublayer.
        gemm_tn_acc(&la.a, &dx, &mut grad[lo.w2..lo.w2 + f * d], t_len, f, d);
        let mut du = vec![0.0; t_len * f];
        gemm_nt_acc(&dx, lw.w2, &mut du, t_len, d, f);
        for (g, &z) in du.iter_mut().zip(&la.u) {
            *g *= silu_grad(z);
        }
        gemm_tn_acc(&la.n2, &du, &mut grad[lo.w1..lo.w1 + d * f], t_len, d, f);
        let mut dn2 = vec![0.0; t_len * d];
        gemm_nt_acc(&du, lw.w1, &mut dn2, t_len, f, d);
        let mut dx_mid = dx.clone();
        rms_norm_backward(
            &la.x_mid,
            &la.inv2,
            lw.ffn_norm,
            &dn2,
            &mut dx_mid,
            &mut grad[lo.ffn_norm..lo.ffn_norm + d],
        );

        // Attention sublayer.
        let mut dx_in = dx_mid.clone();
        if attention {
            gemm_tn_acc(&la.o, &dx_mid, &mut grad[lo.wo..lo.wo + d * d], t_len, d, d);
            let mut d_o = vec![0.0; t_len * d];
            gemm_nt_acc(&dx_mid, lw.wo, &mut d_o, t_len, d, d);
            let mut dq = vec![0.0; t_len * d];
            let mut dk = vec![0.0; t_len * d];
            let mut dv = vec![0.0; t_len * d];
            let mut dp = vec![0.0; t_len * t_len];
            for h in 0..c.n_heads {
                let off = h * dh;
                let att = &la.att[h];
                let a_ref = MatRef::from_row_major_slice(att, t_len, t_len);
                let do_h = head_view(&d_o, t_len, d, off, dh);
                gemm(head_view_mut(&mut dv, t_len, d, off, dh), Accum::Add, a_ref.transpose(), do_h, 1.0);
                gemm(
                    MatMut::from_row_major_slice_mut(&mut dp, t_len, t_len),
                    Accum::Replace,
                    do_h,
                    head_view(&la.v, t_len, d, off, dh).transpose(),
                    1.0,
                );
                for i in 0..t_len {
                    let arow = &att[i * t_len..i * t_len + i + 1];
                    let row = &mut dp[i * t_len..(i + 1) * t_len];
                    let centre = dot(arow, &row[..=i]);
                    for (g, &p) in row[..=i].iter_mut().zip(arow) {
                        *g = p * (*g - centre) * scale;
                    }
                    row[i + 1..].fill(0.0);
                }
                let ds = MatRef::from_row_major_slice(&dp, t_len, t_len);
                let (qh, kh) = (head_view(&la.q, t_len, d, off, dh), head_view(&la.k, t_len, d, off, dh));
                gemm(head_view_mut(&mut dq, t_len, d, off, dh), Accum::Add, ds, kh, 1.0);
                gemm(head_view_mut(&mut dk, t_len, d, off, dh), Accum::Add, ds.transpose(), qh, 1.0);
            }
            let mut dn1 = vec![0.0; t_len * d];
            for (dp, wt, start) in [(&dq, lw.wq, lo.wq), (&dk, lw.wk, lo.wk), (&dv, lw.wv, lo.wv)] {
                gemm_tn_acc(&la.n1, dp, &mut grad[start..start + d * d], t_len, d, d);
                gemm_nt_acc(dp, wt, &mut dn1, t_len, d, d);
            }
            rms_norm_backward(
                &la.x_in,
                &la.inv1,
                lw.attn_norm,
                &dn1,
                &mut dx_in,
                &mut grad[lo.attn_norm..lo.attn_norm + d],
            );
        }
        dx = dx_in;
    }

    for (t, &tok) in acts.tokens.iter().enumerate() {
        let row = &dx[t * d..(t + 1) * d];
        let te = lay.tok_emb + tok as usize * d;
        for (g, &x) in grad[te..te + d].iter_mut().zip(row) {
            *g += x;
        }
        let pe = lay.pos_emb + t * d;
        for (g, &x) in grad[pe..pe + d].iter_mut().zip(row) {
            *g += x;
        }
    }
}

// ---------------------------------------------------------------------------
// Training.

/// A training sequence. `loss_mask[t]` marks `tokens[t]` as a target,
/// predicted from position `t - 1`; `loss_mask[0]` must be false.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub tokens: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl TrainExample {
    fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.loss_mask.len() {
            return Err(NammError::shape(format!(
                "{} tokens with {} mask entries",
                self.tokens.len(),
                self.loss_mask.len()
            )));
        }
        if self.loss_mask.first() == Some(&true) {
            return Err(NammError::invalid("the first token has no context to be predicted from"));
        }
        Ok(())
    }
}

/// Mean masked next-token cross-entropy over the batch and its gradient.
fn loss_and_grad_variant(w: &LmWeights, batch: &[TrainExample], attention: bool) -> Result<(f64, Vec<f64>)> {
    let vocab = w.config.vocab;
    let n_targets: usize = batch.iter().map(|e| e.loss_mask.iter().filter(|&&m| m).count()).sum();
    let mut grad = vec![0.0; w.params.len()];
    if n_targets == 0 {
        for e in batch {
            e.validate()?;
        }
        return Ok((0.0, grad));
    }
    let norm = 1.0 / n_targets as f64;
    let mut total = 0.0;
    for e in batch {
        e.validate()?;
        let acts = forward_acts(w, &e.tokens, attention)?;
        let mut dlogits = vec![0.0; e.tokens.len() * vocab];
        for (t, _) in e.loss_mask.iter().enumerate().filter(|(_, &m)| m) {
            let row = &acts.logits[(t - 1) * vocab..t * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            let target = e.tokens[t] as usize;
            total += (max + sum.ln()) - row[target];
            let drow = &mut dlogits[(t - 1) * vocab..t * vocab];
            for (g, &z) in drow.iter_mut().zip(row) {
                *g = (z - max).exp() / sum * norm;
            }
            drow[target] -= norm;
        }
        backward(w, &acts, &dlogits, &mut grad, attention);
    }
    Ok((total * norm, grad))
}

pub fn loss_and_grad(w: &LmWeights, batch: &[TrainExample]) -> Result<(f64, Vec<f64>)> {
    loss_and_grad_variant(w, batch, true)
}

/// Mean masked cross-entropy without gradients.
pub fn loss(w: &LmWeights, batch: &[TrainExample]) -> Result<f64> {
    loss_variant(w, batch, true)
}

fn loss_variant(w: &LmWeights, batch: &[TrainExample], attention: bool) -> Result<f64> {
    let vocab = w.config.vocab;
    let mut total = 0.0;
    let mut n = 0usize;
    for e in batch {
        e.validate()?;
        if !e.loss_mask.iter().any(|&m| m) {
            continue;
        }
        let acts = forward_acts(w, &e.tokens, attention)?;
        for (t, _) in e.loss_mask.iter().enumerate().filter(|(_, &m)| m) {
            let row = &acts.logits[(t - 1) * vocab..t * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            total += (max + sum.ln()) - row[e.tokens[t] as usize];
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }

    /// Moments as "ADAM", u32 version, u64 step as two u32 halves, u32
    /// length, then m and v as f64.
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = LeWriter::new(w);
        w.bytes(b"ADAM")?;
        w.u32(1)?;
        w.u32(self.t as u32)?;
        w.u32((self.t >> 32) as u32)?;
        w.u32(self.m.len() as u32)?;
        w.f64s(&self.m)?;
        w.f64s(&self.v)?;
        w.into_inner().flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R, config: AdamConfig) -> Result<Self> {
        let mut r = LeReader::new(BufReader::new(r));
        r.magic(b"ADAM")?;
        r.expect_u32("optimizer state version", 1)?;
        let lo = r.u32()? as u64;
        let hi = r.u32()? as u64;
        let n = r.u32()? as usize;
        let m = r.f64s(n)?;
        let v = r.f64s(n)?;
        Ok(Self {
            config,
            m,
            v,
            t: lo | (hi << 32),
        })
    }
}

/// One Adam step on the masked cross-entropy of `batch`. Returns the loss
/// before the update. A batch without targets leaves the weights untouched.
pub fn train_step(w: &mut LmWeights, batch: &[TrainExample], adam: &mut AdamState) -> Result<f64> {
    let (loss, grad) = loss_and_grad(w, batch)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(NammError::Diverged(format!("training loss is {loss}")));
    }
    if batch.iter().all(|e| !e.loss_mask.iter().any(|&m| m)) {
        return Ok(loss);
    }
    adam.step(&mut w.params, &grad);
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
}

/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`, and 0 when both agree
/// exactly. Central differences at `ε = 1e-5` carry rounding noise near
/// `1e-16 · loss / ε ≈ 1e-10`, so below the floor the check is effectively
/// absolute.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Central finite differences against the analytic gradient on
/// `n_coords` coordinates drawn without replacement from the parameters
/// that `batch` can reach (embedding rows of absent tokens and unused
/// positions are skipped, their gradient is structurally zero).
pub fn grad_check(w: &LmWeights, batch: &[TrainExample], epsilon: f64, n_coords: usize, seed: u64) -> Result<GradCheckReport> {
    grad_check_variant(w, batch, epsilon, n_coords, seed, true)
}

fn grad_check_variant(
    w: &LmWeights,
    batch: &[TrainExample],
    epsilon: f64,
    n_coords: usize,
    seed: u64,
    attention: bool,
) -> Result<GradCheckReport> {
    let (_, grad) = loss_and_grad_variant(w, batch, attention)?;
    let c = w.config;
    let d = c.d_model;
    let lay = &w.layout;
    let mut used_tokens = vec![false; c.vocab];
    let mut max_len = 0;
    for e in batch {
        for &t in &e.tokens {
            used_tokens[t as usize] = true;
        }
        max_len = max_len.max(e.tokens.len());
    }
    let mut candidates: Vec<usize> = Vec::new();
    for (tok, _) in used_tokens.iter().enumerate().filter(|(_, &u)| u) {
        candidates.extend(lay.tok_emb + tok * d..lay.tok_emb + (tok + 1) * d);
    }
    candidates.extend(lay.pos_emb..lay.pos_emb + max_len * d);
    for lo in &lay.layers {
        if attention {
            candidates.extend(lo.attn_norm..lo.ffn_norm);
        }
        candidates.extend(lo.ffn_norm..lo.w2 + c.d_ff * d);
    }
    candidates.extend(lay.final_norm..lay.total);
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut candidates);
    candidates.truncate(n_coords);
    candidates.sort_unstable();

    let mut probe = w.clone();
    let mut numeric = Vec::with_capacity(candidates.len());
    let mut analytic = Vec::with_capacity(candidates.len());
    let mut max_rel: f64 = 0.0;
    for &i in &candidates {
        let orig = probe.params[i];
        probe.params[i] = orig + epsilon;
        let up = loss_variant(&probe, batch, attention)?;
        probe.params[i] = orig - epsilon;
        let down = loss_variant(&probe, batch, attention)?;
        probe.params[i] = orig;
        let num = (up - down) / (2.0 * epsilon);
        max_rel = max_rel.max(relative_error(grad[i], num));
        numeric.push(num);
        analytic.push(grad[i]);
    }
    Ok(GradCheckReport {
        coordinates: candidates,
        analytic,
        numeric,
        max_rel_error: max_rel,
    })
}

// ---------------------------------------------------------------------------
// Cached inference.

/// Logits for a chunk and, optionally, the attention each head paid over
/// its cached keys, indexed `layer * n_heads + head`.
#[derive(Clone, Debug)]
pub struct ChunkOutput {
    pub logits: Matrix,
    pub attn: Option<Vec<Matrix>>,
}

/// Runs `tokens` against `cache`, appending their keys and values with
/// `birth_step`. Tokens take the positions that follow everything the cache
/// has ever seen; each query attends to retained keys at positions up to
/// its own. Cumulative attention in the token metadata is updated.
pub fn forward_chunk(
    w: &LmWeights,
    cache: &mut KvCache,
    tokens: &[u32],
    birth_step: u64,
    keep_attn: bool,
) -> Result<ChunkOutput> {
    let c = w.config;
    if cache.n_layers() != c.n_layers || cache.n_heads() != c.n_heads || cache.head(0, 0).d_head() != c.d_head() {
        return Err(NammError::shape("cache geometry does not match the model"));
    }
    let start = cache.head(0, 0).appended();
    check_tokens(&c, tokens, start)?;
    let (n, d, f, dh) = (tokens.len(), c.d_model, c.d_ff, c.d_head());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = embed(w, tokens, start);
    let mut attn_out = keep_attn.then(Vec::new);
    let mut logits_row = Vec::new();
    let mut probs_row = Vec::new();
    for l in 0..c.n_layers {
        let lw = w.layer(l);
        let (n1, _) = rms_norm(&x, lw.attn_norm, n);
        let q = matmul_rows(&n1, lw.wq, n, d, d);
        let k = matmul_rows(&n1, lw.wk, n, d, d);
        let v = matmul_rows(&n1, lw.wv, n, d, d);
        let mut o = vec![0.0; n * d];
        for h in 0..c.n_heads {
            let off = h * dh;
            let slice = |m: &[f64]| Matrix::from_fn(n, dh, |i, j| m[i * d + off + j]);
            let head = cache.head_mut(l, h);
            head.append(&slice(&k), &slice(&v), birth_step)?;
            let n_keys = head.len();
            let positions: Vec<usize> = head.meta().iter().map(|m| m.position).collect();
            let mut a = keep_attn.then(|| Matrix::zeros(n, n_keys));
            logits_row.resize(n_keys, 0.0);
            probs_row.resize(n_keys, 0.0);
            for i in 0..n {
                let pos = start + i;
                let qi = &q[i * d + off..i * d + off + dh];
                // Positions are increasing, so visible keys form a prefix.
                let visible = positions.partition_point(|&p| p <= pos);
                for j in 0..visible {
                    logits_row[j] = dot(qi, head.key(j)) * scale;
                }
                masked_softmax_row(&logits_row[..visible], |_| true, &mut probs_row[..visible]);
                let oi = &mut o[i * d + off..i * d + off + dh];
                for j in 0..visible {
                    let p = probs_row[j];
                    for (ov, &vv) in oi.iter_mut().zip(head.value(j)) {
                        *ov += p * vv;
                    }
                }
                let meta = head.meta_mut();
                for j in 0..visible {
                    meta[j].cum_attn += probs_row[j];
                }
                if let Some(a) = a.as_mut() {
                    a.row_mut(i)[..visible].copy_from_slice(&probs_row[..visible]);
                }
            }
            if let (Some(out), Some(a)) = (attn_out.as_mut(), a) {
                out.push(a);
            }
        }
        gemm_acc(&o, lw.wo, &mut x, n, d, d);
        let (n2, _) = rms_norm(&x, lw.ffn_norm, n);
        let mut u = matmul_rows(&n2, lw.w1, n, d, f);
        for z in &mut u {
            *z = silu(*z);
        }
        gemm_acc(&u, lw.w2, &mut x, n, f, d);
    }
    let (nf, _) = rms_norm(&x, w.span(w.layout.final_norm, d), n);
    let logits = matmul_rows(&nf, w.span(w.layout.out, d * c.vocab), n, d, c.vocab);
    Ok(ChunkOutput {
        logits: Matrix::from_vec(n, c.vocab, logits)?,
        attn: attn_out,
    })
}

pub fn new_cache(config: &LmConfig) -> KvCache {
    KvCache::new(config.n_layers, config.n_heads, config.d_head())
}

/// What an observer sees at each eviction update.
pub struct UpdateEvent<'a> {
    pub step: u64,
    /// Attention since the previous update per (layer, head), over the
    /// tokens present before eviction. Empty unless capture is enabled.
    pub attn: &'a [Matrix],
    /// Original positions per (layer, head) before eviction.
    pub positions_before: &'a [Vec<usize>],
    pub outcome: &'a UpdateOutcome,
    pub cache: &'a KvCache,
}

pub trait UpdateObserver {
    fn on_update(&mut self, event: &UpdateEvent<'_>) -> Result<()>;

    /// Whether the event should carry pre-eviction positions.
    fn wants_positions(&self) -> bool {
        true
    }
}

/// Observer that ignores every update.
pub struct NoObserver;

impl UpdateObserver for NoObserver {
    fn on_update(&mut self, _: &UpdateEvent<'_>) -> Result<()> {
        Ok(())
    }

    fn wants_positions(&self) -> bool {
        false
    }
}

/// Incremental inference for one sequence under an eviction policy.
///
/// Input is split at multiples of `n_up`, and the policy runs whenever the
/// processed token count reaches one. Between updates the attention rows of
/// every head are buffered so the policy sees the full `n_up × n_tokens`
/// chunk. A token's birth step is the first update step at or after its own
/// position, so oldness counts queries in whole update intervals.
pub struct Session<'w> {
    weights: &'w LmWeights,
    policy: EvictionPolicy,
    state: PolicyState,
    cache: KvCache,
    n_up: usize,
    step: u64,
    capture: bool,
    rows: Vec<Vec<Vec<f64>>>,
    last_logits: Vec<f64>,
}

impl<'w> Session<'w> {
    pub fn new(weights: &'w LmWeights, policy: EvictionPolicy, n_up: usize) -> Result<Self> {
        policy.validate()?;
        if n_up == 0 {
            return Err(NammError::Config("n_up must be positive".into()));
        }
        if matches!(policy, EvictionPolicy::Namm(_)) && n_up % STRIDE != 0 {
            return Err(NammError::Config(format!(
                "n_up {n_up} must be a multiple of the spectrogram stride {STRIDE}"
            )));
        }
        let c = weights.config();
        let capture = policy.needs_attention();
        Ok(Self {
            weights,
            policy,
            state: PolicyState::default(),
            cache: new_cache(c),
            n_up,
            step: 0,
            capture,
            rows: vec![Vec::new(); c.n_layers * c.n_heads],
            last_logits: Vec::new(),
        })
    }

    /// Also buffer attention for policies that do not need it, so that
    /// observers receive it.
    pub fn capture_attention(mut self) -> Self {
        self.capture = true;
        self
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn policy(&self) -> &EvictionPolicy {
        &self.policy
    }

    /// Logits produced by the most recently fed token.
    pub fn last_logits(&self) -> &[f64] {
        &self.last_logits
    }

    pub fn feed(&mut self, tokens: &[u32], observer: &mut dyn UpdateObserver) -> Result<()> {
        let n_up = self.n_up as u64;
        let mut rest = tokens;
        while !rest.is_empty() {
            let room = (n_up - self.step % n_up) as usize;
            let (piece, tail) = rest.split_at(room.min(rest.len()));
            let birth = (self.step / n_up + 1) * n_up;
            let out = forward_chunk(self.weights, &mut self.cache, piece, birth, self.capture)?;
            if let Some(attn) = out.attn {
                for (buf, a) in self.rows.iter_mut().zip(attn) {
                    for i in 0..a.rows() {
                        buf.push(a.row(i).to_vec());
                    }
                }
            }
            let v = self.weights.config().vocab;
            let last = out.logits.rows() - 1;
            self.last_logits = out.logits.data()[last * v..(last + 1) * v].to_vec();
            self.step += piece.len() as u64;
            rest = tail;
            if self.step % n_up == 0 {
                self.update(observer)?;
            }
        }
        Ok(())
    }

    fn update(&mut self, observer: &mut dyn UpdateObserver) -> Result<()> {
        let namm = matches!(self.policy, EvictionPolicy::Namm(_));
        let key_counts = self.cache_heads();
        let chunks: Vec<Matrix> = if self.capture {
            self.rows
                .iter_mut()
                .zip(key_counts)
                .map(|(rows, n_keys)| {
                    let mut m = Matrix::zeros(rows.len(), n_keys);
                    for (i, r) in rows.drain(..).enumerate() {
                        let dst = &mut m.row_mut(i)[..r.len()];
                        if namm {
                            // Learned eviction sees attention at trace precision.
                            for (o, x) in dst.iter_mut().zip(r) {
                                *o = x as f32 as f64;
                            }
                        } else {
                            dst.copy_from_slice(&r);
                        }
                    }
                    m
                })
                .collect()
        } else {
            Vec::new()
        };
        let positions_before = if observer.wants_positions() {
            all_positions(&self.cache)
        } else {
            Vec::new()
        };
        let outcome = apply_update(&self.policy, &mut self.state, &mut self.cache, &chunks, self.step)?;
        observer.on_update(&UpdateEvent {
            step: self.step,
            attn: &chunks,
            positions_before: &positions_before,
            outcome: &outcome,
            cache: &self.cache,
        })
    }

    fn cache_heads(&self) -> Vec<usize> {
        let c = &self.cache;
        (0..c.n_layers() * c.n_heads())
            .map(|i| c.head(i / c.n_heads(), i % c.n_heads()).len())
            .collect()
    }
}

fn all_positions(cache: &KvCache) -> Vec<Vec<usize>> {
    (0..cache.n_layers() * cache.n_heads())
        .map(|i| cache.head(i / cache.n_heads(), i % cache.n_heads()).positions())
        .collect()
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(logits: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy continuation of `prompt` for `max_new` tokens.
pub fn generate(w: &LmWeights, policy: &EvictionPolicy, prompt: &[u32], max_new: usize, n_up: usize) -> Result<Vec<u32>> {
    let mut session = Session::new(w, policy.clone(), n_up)?;
    generate_in(&mut session, prompt, max_new, &mut NoObserver)
}

/// Greedy decoding inside an existing session.
pub fn generate_in(
    session: &mut Session<'_>,
    prompt: &[u32],
    max_new: usize,
    observer: &mut dyn UpdateObserver,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(NammError::invalid("empty prompt"));
    }
    session.feed(prompt, observer)?;
    continue_greedy(session, max_new, observer)
}

/// Greedy decoding of `max_new` tokens after whatever the session has been
/// fed so far.
pub fn continue_greedy(session: &mut Session<'_>, max_new: usize, observer: &mut dyn UpdateObserver) -> Result<Vec<u32>> {
    if session.last_logits().is_empty() {
        return Err(NammError::invalid("session has not been fed any tokens"));
    }
    let mut out = Vec::with_capacity(max_new);
    for i in 0..max_new {
        let tok = argmax(session.last_logits());
        out.push(tok);
        if i + 1 < max_new {
            session.feed(&[tok], observer)?;
        }
    }
    Ok(out)
}
