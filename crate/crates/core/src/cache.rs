//! Per-(layer, head) key/value storage with the metadata eviction needs.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{NammError, Result};
use crate::numerics::Matrix;
use crate::spectrogram::EmaState;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenMeta {
    /// Index of the token in the original sequence.
    pub position: usize,
    /// Step counter at the time the token was appended.
    pub birth_step: u64,
    pub ema: EmaState,
    /// Most recent memory-model score; `+inf` until first scored.
    pub last_score: f64,
    /// Running column sum of every attention row that saw this token.
    pub cum_attn: f64,
}

/// Keys, values and metadata for one attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadCache {
    d_head: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
    meta: Vec<TokenMeta>,
    appended: usize,
}

impl HeadCache {
    pub fn new(d_head: usize) -> Self {
        Self {
            d_head,
            keys: Vec::new(),
            values: Vec::new(),
            meta: Vec::new(),
            appended: 0,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    /// Total tokens ever appended, retained or not.
    pub fn appended(&self) -> usize {
        self.appended
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    #[inline]
    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.d_head..(i + 1) * self.d_head]
    }

    #[inline]
    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.d_head..(i + 1) * self.d_head]
    }

    pub fn meta(&self) -> &[TokenMeta] {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut [TokenMeta] {
        &mut self.meta
    }

    pub fn positions(&self) -> Vec<usize> {
        self.meta.iter().map(|m| m.position).collect()
    }

    /// Appends rows; positions continue from the last appended token.
    pub fn append(&mut self, keys: &Matrix, values: &Matrix, step: u64) -> Result<()> {
        if keys.rows() != values.rows() || keys.cols() != self.d_head || values.cols() != self.d_head {
            return Err(NammError::shape(format!(
                "append keys {}x{} values {}x{} into head of width {}",
                keys.rows(),
                keys.cols(),
                values.rows(),
                values.cols(),
                self.d_head
            )));
        }
        self.keys.extend_from_slice(keys.data());
        self.values.extend_from_slice(values.data());
        for _ in 0..keys.rows() {
            self.meta.push(TokenMeta {
                position: self.appended,
                birth_step: step,
                ema: EmaState::default(),
                last_score: f64::INFINITY,
                cum_attn: 0.0,
            });
            self.appended += 1;
        }
        Ok(())
    }

    /// Keeps tokens whose flag is set, preserving order. Returns the
    /// original positions of the evicted tokens.
    pub fn retain(&mut self, keep: &[bool]) -> Result<Vec<usize>> {
        if keep.len() != self.len() {
            return Err(NammError::shape(format!(
                "retain flags {} for {} tokens",
                keep.len(),
                self.len()
            )));
        }
        if keep.iter().all(|&k| k) {
            return Ok(Vec::new());
        }
        let d = self.d_head;
        let mut evicted = Vec::new();
        let mut w = 0;
        for r in 0..keep.len() {
            if keep[r] {
                if w != r {
                    self.keys.copy_within(r * d..(r + 1) * d, w * d);
                    self.values.copy_within(r * d..(r + 1) * d, w * d);
                    self.meta[w] = self.meta[r];
                }
                w += 1;
            } else {
                evicted.push(self.meta[r].position);
            }
        }
        self.keys.truncate(w * d);
        self.values.truncate(w * d);
        self.meta.truncate(w);
        Ok(evicted)
    }
}

/// The KV cache of one sequence, one [`HeadCache`] per (layer, head).
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    n_layers: usize,
    n_heads: usize,
    heads: Vec<HeadCache>,
}

impl KvCache {
    pub fn new(n_layers: usize, n_heads: usize, d_head: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            heads: (0..n_layers * n_heads).map(|_| HeadCache::new(d_head)).collect(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadCache {
        &self.heads[layer * self.n_heads + head]
    }

    pub fn head_mut(&mut self, layer: usize, head: usize) -> &mut HeadCache {
        &mut self.heads[layer * self.n_heads + head]
    }

    pub fn append(
        &mut self,
        layer: usize,
        head: usize,
        keys: &Matrix,
        values: &Matrix,
        step: u64,
    ) -> Result<()> {
        self.head_mut(layer, head).append(keys, values, step)
    }

    pub fn total_len(&self) -> usize {
        self.heads.iter().map(HeadCache::len).sum()
    }

    /// Mean retained tokens per (layer, head).
    pub fn mean_len(&self) -> f64 {
        self.total_len() as f64 / self.heads.len() as f64
    }

    pub fn stats(&self, step: u64) -> CacheStats {
        stats(self, step)
    }
}

/// Sizes and oldness per (layer, head), indexed `layer * n_heads + head`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub step: u64,
    pub n_layers: usize,
    pub n_heads: usize,
    pub retained: Vec<usize>,
    pub appended: Vec<usize>,
    pub mean_oldness: Vec<f64>,
}

impl CacheStats {
    pub fn mean_retained(&self) -> f64 {
        self.retained.iter().sum::<usize>() as f64 / self.retained.len().max(1) as f64
    }

    /// Mean retained fraction of appended tokens.
    pub fn mean_fraction(&self) -> f64 {
        let total: usize = self.appended.iter().sum();
        if total == 0 {
            return 1.0;
        }
        self.retained.iter().sum::<usize>() as f64 / total as f64
    }

    pub fn layer_retained(&self, layer: usize) -> f64 {
        let s = &self.retained[layer * self.n_heads..(layer + 1) * self.n_heads];
        s.iter().sum::<usize>() as f64 / self.n_heads as f64
    }

    pub fn layer_oldness(&self, layer: usize) -> f64 {
        let s = &self.mean_oldness[layer * self.n_heads..(layer + 1) * self.n_heads];
        s.iter().sum::<f64>() / self.n_heads as f64
    }
}

/// Retained counts and mean oldness (`step - birth_step`, floored at 0)
/// per head.
pub fn stats(cache: &KvCache, step: u64) -> CacheStats {
    let mut retained = Vec::with_capacity(cache.heads.len());
    let mut appended = Vec::with_capacity(cache.heads.len());
    let mut mean_oldness = Vec::with_capacity(cache.heads.len());
    for h in &cache.heads {
        retained.push(h.len());
        appended.push(h.appended());
        let old = if h.is_empty() {
            0.0
        } else {
            h.meta.iter().map(|m| step.saturating_sub(m.birth_step) as f64).sum::<f64>() / h.len() as f64
        };
        mean_oldness.push(old);
    }
    CacheStats {
        step,
        n_layers: cache.n_layers,
        n_heads: cache.n_heads,
        retained,
        appended,
        mean_oldness,
    }
}

/// One row of the retained-token dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetainedRow {
    pub layer: usize,
    pub head: usize,
    pub token_position: usize,
    pub birth_step: u64,
    pub oldness: u64,
    pub score: f64,
    pub retained: u8,
}

/// Rows for every token currently in the cache plus the `evicted` ones
/// (given as `(layer, head, meta)`), ordered by layer, head, position.
pub fn retained_rows(cache: &KvCache, step: u64, evicted: &[(usize, usize, TokenMeta)]) -> Vec<RetainedRow> {
    let mut rows = Vec::new();
    for layer in 0..cache.n_layers {
        for head in 0..cache.n_heads {
            for m in cache.head(layer, head).meta() {
                rows.push(RetainedRow {
                    layer,
                    head,
                    token_position: m.position,
                    birth_step: m.birth_step,
                    oldness: step.saturating_sub(m.birth_step),
                    score: m.last_score,
                    retained: 1,
                });
            }
        }
    }
    for &(layer, head, m) in evicted {
        rows.push(RetainedRow {
            layer,
            head,
            token_position: m.position,
            birth_step: m.birth_step,
            oldness: step.saturating_sub(m.birth_step),
            score: m.last_score,
            retained: 0,
        });
    }
    rows.sort_by_key(|r| (r.layer, r.head, r.token_position));
    rows
}

/// CSV with header `layer,head,token_position,birth_step,oldness,score,retained`.
pub fn write_retained_csv<W: Write>(w: W, rows: &[RetainedRow]) -> Result<()> {
    let mut w = w;
    writeln!(w, "layer,head,token_position,birth_step,oldness,score,retained")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.layer, r.head, r.token_position, r.birth_step, r.oldness, r.score, r.retained
        )?;
    }
    Ok(())
}
