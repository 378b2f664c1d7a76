//! Recorded attention traces and offline replay of a memory model over them.
//!
//! Stream layout (little-endian): `"ATRC"`, `u32` version, `u32 n_layers`,
//! `u32 n_heads`, then records until end of input, each
//! `u32 layer, u32 head, u32 n_queries, u32 n_keys` followed by the
//! `n_queries × n_keys` attention rows as `f32`, row-major.
//!
//! A record holds the attention of one update interval for one head. Its
//! columns are either the head's cache as it stood after the previous
//! replayed eviction plus the new tokens, or every token seen so far (as a
//! model without eviction would record them). Replay tells the two apart by
//! `n_keys`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::binio::{LeReader, LeWriter};
use crate::cache::KvCache;
use crate::error::{NammError, Result};
use crate::eviction::{apply_update, namm_features, EvictionPolicy, NammScorer, PolicyState};
use crate::lm::{UpdateEvent, UpdateObserver};
use crate::numerics::Matrix;
use crate::spectrogram::FeatureVector;

pub const TRACE_MAGIC: &[u8; 4] = b"ATRC";
pub const TRACE_VERSION: u32 = 1;
/// Slack allowed on attention row sums.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;
const MAX_RECORD_VALUES: u64 = 1 << 28;

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub layer: u32,
    pub head: u32,
    pub n_queries: u32,
    pub n_keys: u32,
    /// Row-major `n_queries × n_keys`.
    pub data: Vec<f32>,
}

impl TraceRecord {
    /// Rounds `attn` to `f32`.
    pub fn from_matrix(layer: u32, head: u32, attn: &Matrix) -> Self {
        Self {
            layer,
            head,
            n_queries: attn.rows() as u32,
            n_keys: attn.cols() as u32,
            data: attn.data().iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.n_queries as usize, self.n_keys as usize, |i, j| {
            self.data[i * self.n_keys as usize + j] as f64
        })
    }

    /// Index of the first offending value, with a description.
    fn check_values(&self) -> std::result::Result<(), (usize, String)> {
        let k = self.n_keys as usize;
        if self.data.len() != self.n_queries as usize * k {
            return Err((0, format!("{} values for a {}x{k} record", self.data.len(), self.n_queries)));
        }
        for (r, row) in self.data.chunks(k.max(1)).enumerate() {
            let mut sum = 0.0;
            for (c, &x) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&x) {
                    return Err((r * k + c, format!("attention value {x} outside [0, 1]")));
                }
                sum += x as f64;
            }
            if sum > 1.0 + ROW_SUM_TOLERANCE {
                return Err((r * k, format!("attention row {r} sums to {sum}")));
            }
        }
        Ok(())
    }
}

/// A fully loaded trace.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub n_layers: u32,
    pub n_heads: u32,
    pub records: Vec<TraceRecord>,
}

impl AttentionTrace {
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut tw = TraceWriter::new(w, self.n_layers, self.n_heads)?;
        for r in &self.records {
            tw.write_record(r)?;
        }
        tw.finish()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut tr = TraceReader::new(r)?;
        let mut records = Vec::new();
        while let Some(rec) = tr.next_record()? {
            records.push(rec);
        }
        Ok(Self {
            n_layers: tr.n_layers,
            n_heads: tr.n_heads,
            records,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Streaming writer; validates every record before writing it.
pub struct TraceWriter<W: Write> {
    w: LeWriter<W>,
    n_layers: u32,
    n_heads: u32,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(w: W, n_layers: u32, n_heads: u32) -> Result<Self> {
        let mut w = LeWriter::new(w);
        w.bytes(TRACE_MAGIC)?;
        w.u32(TRACE_VERSION)?;
        w.u32(n_layers)?;
        w.u32(n_heads)?;
        Ok(Self { w, n_layers, n_heads })
    }

    pub fn write_record(&mut self, r: &TraceRecord) -> Result<()> {
        if r.layer >= self.n_layers || r.head >= self.n_heads {
            return Err(NammError::invalid(format!(
                "record for layer {} head {} in a {}x{} trace",
                r.layer, r.head, self.n_layers, self.n_heads
            )));
        }
        r.check_values().map_err(|(i, msg)| NammError::invalid(format!("value {i}: {msg}")))?;
        self.w.u32(r.layer)?;
        self.w.u32(r.head)?;
        self.w.u32(r.n_queries)?;
        self.w.u32(r.n_keys)?;
        for &x in &r.data {
            self.w.f32(x)?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<W> {
        let mut inner = self.w.into_inner();
        inner.flush()?;
        Ok(inner)
    }
}

/// Streaming reader. Every format error carries the byte offset.
pub struct TraceReader<R: BufRead> {
    r: LeReader<R>,
    pub n_layers: u32,
    pub n_heads: u32,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(r: R) -> Result<Self> {
        let mut r = LeReader::new(r);
        r.magic(TRACE_MAGIC)?;
        r.expect_u32("trace version", TRACE_VERSION)?;
        let at = r.offset();
        let n_layers = r.u32()?;
        let n_heads = r.u32()?;
        if n_layers == 0 || n_heads == 0 {
            return Err(NammError::format(at, format!("empty trace shape {n_layers}x{n_heads}")));
        }
        Ok(Self { r, n_layers, n_heads })
    }

    pub fn next_record(&mut self) -> Result<Option<TraceRecord>> {
        if self.r.at_eof()? {
            return Ok(None);
        }
        let start = self.r.offset();
        let layer = self.r.u32()?;
        let head = self.r.u32()?;
        if layer >= self.n_layers || head >= self.n_heads {
            return Err(NammError::format(
                start,
                format!(
                    "record for layer {layer} head {head} in a {}x{} trace",
                    self.n_layers, self.n_heads
                ),
            ));
        }
        let n_queries = self.r.u32()?;
        let n_keys = self.r.u32()?;
        let values = n_queries as u64 * n_keys as u64;
        if values > MAX_RECORD_VALUES {
            return Err(NammError::format(
                start + 8,
                format!("record of {n_queries}x{n_keys} values is too large"),
            ));
        }
        let body = self.r.offset();
        let data = self.r.f32s(values as usize)?;
        let rec = TraceRecord {
            layer,
            head,
            n_queries,
            n_keys,
            data,
        };
        rec.check_values()
            .map_err(|(i, msg)| NammError::format(body + 4 * i as u64, msg))?;
        Ok(Some(rec))
    }
}

/// One line of the retention log shared by live runs and replay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionRow {
    pub layer: usize,
    pub head: usize,
    pub chunk: usize,
    pub step: u64,
    pub token_position: usize,
    pub score: f64,
    pub retained: u8,
}

pub fn write_retention_csv<W: Write>(w: W, rows: &[RetentionRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> NammError {
    NammError::Io(std::io::Error::other(e))
}

/// Retained positions keyed by (layer, head, chunk).
pub fn retained_sets(rows: &[RetentionRow]) -> BTreeMap<(usize, usize, usize), Vec<usize>> {
    let mut out: BTreeMap<_, Vec<usize>> = BTreeMap::new();
    for r in rows {
        let set = out.entry((r.layer, r.head, r.chunk)).or_default();
        if r.retained == 1 {
            set.push(r.token_position);
        }
    }
    out
}

/// Observer that writes every update's attention to a trace and logs which
/// tokens each head kept. The session must capture attention.
pub struct TraceExporter<W: Write> {
    writer: TraceWriter<W>,
    n_heads: usize,
    chunk: usize,
    pub log: Vec<RetentionRow>,
}

impl<W: Write> TraceExporter<W> {
    pub fn new(w: W, n_layers: usize, n_heads: usize) -> Result<Self> {
        Ok(Self {
            writer: TraceWriter::new(w, n_layers as u32, n_heads as u32)?,
            n_heads,
            chunk: 0,
            log: Vec::new(),
        })
    }

    pub fn finish(self) -> Result<(W, Vec<RetentionRow>)> {
        Ok((self.writer.finish()?, self.log))
    }
}

impl<W: Write> UpdateObserver for TraceExporter<W> {
    fn on_update(&mut self, ev: &UpdateEvent<'_>) -> Result<()> {
        if ev.attn.is_empty() {
            return Err(NammError::invalid("trace export needs a session that captures attention"));
        }
        for (idx, attn) in ev.attn.iter().enumerate() {
            let (layer, head) = (idx / self.n_heads, idx % self.n_heads);
            self.writer
                .write_record(&TraceRecord::from_matrix(layer as u32, head as u32, attn))?;
            let evicted = &ev.outcome.evicted[idx];
            let scores = ev.outcome.scores.as_ref().map(|s| &s[idx]);
            for (i, &p) in ev.positions_before[idx].iter().enumerate() {
                self.log.push(RetentionRow {
                    layer,
                    head,
                    chunk: self.chunk,
                    step: ev.step,
                    token_position: p,
                    score: scores.map_or(f64::NAN, |s| s[i]),
                    retained: u8::from(!evicted.contains(&p)),
                });
            }
        }
        self.chunk += 1;
        Ok(())
    }
}

/// Equal-width histogram over `[lo, hi]`; the top edge is inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl ScoreHistogram {
    /// Non-finite scores are skipped. Degenerate ranges put everything in
    /// the first bin.
    pub fn from_scores(scores: impl IntoIterator<Item = f64>, bins: usize) -> Self {
        let vals: Vec<f64> = scores.into_iter().filter(|x| x.is_finite()).collect();
        let bins = bins.max(1);
        let mut counts = vec![0u64; bins];
        if vals.is_empty() {
            return Self { lo: 0.0, hi: 0.0, counts };
        }
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / bins as f64;
        for v in vals {
            let b = if width > 0.0 {
                (((v - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[b] += 1;
        }
        Self { lo, hi, counts }
    }

    pub fn edges(&self) -> Vec<f64> {
        let n = self.counts.len();
        (0..=n).map(|i| self.lo + (self.hi - self.lo) * i as f64 / n as f64).collect()
    }
}

/// Scores and features for one head at one replayed update.
#[derive(Clone, Debug)]
pub struct ReplayRecord {
    pub layer: usize,
    pub head: usize,
    pub chunk: usize,
    pub step: u64,
    /// Columns referred to every token so far rather than the cache.
    pub absolute_columns: bool,
    pub positions: Vec<usize>,
    pub oldness: Vec<u64>,
    pub scores: Vec<f64>,
    pub retained: Vec<bool>,
    pub features: Vec<FeatureVector>,
}

#[derive(Clone, Debug, Default)]
pub struct ReplayReport {
    pub records: Vec<ReplayRecord>,
}

impl ReplayReport {
    pub fn retention_rows(&self) -> Vec<RetentionRow> {
        let mut rows = Vec::new();
        for r in &self.records {
            for (i, &p) in r.positions.iter().enumerate() {
                rows.push(RetentionRow {
                    layer: r.layer,
                    head: r.head,
                    chunk: r.chunk,
                    step: r.step,
                    token_position: p,
                    score: r.scores[i],
                    retained: u8::from(r.retained[i]),
                });
            }
        }
        rows
    }

    pub fn histogram(&self, bins: usize) -> ScoreHistogram {
        ScoreHistogram::from_scores(self.records.iter().flat_map(|r| r.scores.iter().copied()), bins)
    }

    /// Header `layer,head,chunk,step,token_position,oldness,f0..f24`.
    pub fn write_features_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = ["layer", "head", "chunk", "step", "token_position", "oldness"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..crate::spectrogram::FEATURE_DIM).map(|k| format!("f{k}")));
        out.write_record(&header).map_err(csv_error)?;
        for r in &self.records {
            for (i, fv) in r.features.iter().enumerate() {
                let mut row = vec![
                    r.layer.to_string(),
                    r.head.to_string(),
                    r.chunk.to_string(),
                    r.step.to_string(),
                    r.positions[i].to_string(),
                    r.oldness[i].to_string(),
                ];
                row.extend(fv.0.iter().map(|x| x.to_string()));
                out.write_record(&row).map_err(csv_error)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Replays `scorer` over a trace without running any model.
///
/// Records are grouped per head in stream order; the `u`-th record of
/// every head forms update `u`, and all of them must share `n_queries`,
/// which must be a multiple of the spectrogram stride.
pub fn replay(trace: &AttentionTrace, scorer: Arc<NammScorer>) -> Result<ReplayReport> {
    let (n_layers, n_heads) = (trace.n_layers as usize, trace.n_heads as usize);
    let n = n_layers * n_heads;
    let mut per_head: Vec<Vec<&TraceRecord>> = vec![Vec::new(); n];
    for r in &trace.records {
        per_head[r.layer as usize * n_heads + r.head as usize].push(r);
    }
    let n_updates = per_head[0].len();
    if let Some(idx) = per_head.iter().position(|h| h.len() != n_updates) {
        return Err(NammError::invalid(format!(
            "layer {} head {} has {} records, layer 0 head 0 has {n_updates}",
            idx / n_heads,
            idx % n_heads,
            per_head[idx].len()
        )));
    }
    let stride = scorer.pipeline.plan().stride();
    let policy = EvictionPolicy::Namm(scorer.clone());
    let mut state = PolicyState::default();
    let mut cache = KvCache::new(n_layers, n_heads, 0);
    let mut report = ReplayReport::default();
    let mut step = 0u64;
    for u in 0..n_updates {
        let n_q = per_head[0][u].n_queries as usize;
        if n_q == 0 || n_q % stride != 0 {
            return Err(NammError::invalid(format!(
                "update {u} has {n_q} queries, not a positive multiple of the stride {stride}"
            )));
        }
        let appended_before = cache.head(0, 0).appended();
        step += n_q as u64;
        let empty = Matrix::zeros(n_q, 0);
        for idx in 0..n {
            cache.append(idx / n_heads, idx % n_heads, &empty, &empty, step)?;
        }
        let mut chunks = Vec::with_capacity(n);
        let mut absolute = Vec::with_capacity(n);
        let mut features = Vec::with_capacity(n);
        for (idx, recs) in per_head.iter().enumerate() {
            let rec = recs[u];
            if rec.n_queries as usize != n_q {
                return Err(NammError::invalid(format!(
                    "update {u}: layer {} head {} has {} queries, expected {n_q}",
                    rec.layer, rec.head, rec.n_queries
                )));
            }
            let h = cache.head(idx / n_heads, idx % n_heads);
            let full = rec.to_matrix();
            let (attn, abs) = if rec.n_keys as usize == h.len() {
                (full, false)
            } else if rec.n_keys as usize == appended_before + n_q {
                let cols = h.positions();
                (Matrix::from_fn(n_q, cols.len(), |i, j| full[(i, cols[j])]), true)
            } else {
                return Err(NammError::invalid(format!(
                    "update {u}: layer {} head {} has {} keys; the replayed cache holds {} of {} tokens",
                    rec.layer,
                    rec.head,
                    rec.n_keys,
                    h.len(),
                    appended_before + n_q
                )));
            };
            features.push(namm_features(h, &attn, &scorer.pipeline, step)?.0);
            chunks.push(attn);
            absolute.push(abs);
        }
        let positions: Vec<Vec<usize>> = (0..n)
            .map(|idx| cache.head(idx / n_heads, idx % n_heads).positions())
            .collect();
        let oldness: Vec<Vec<u64>> = (0..n)
            .map(|idx| {
                let h = cache.head(idx / n_heads, idx % n_heads);
                h.meta().iter().map(|m| step.saturating_sub(m.birth_step)).collect()
            })
            .collect();
        let outcome = apply_update(&policy, &mut state, &mut cache, &chunks, step)?;
        let scores = outcome
            .scores
            .ok_or_else(|| NammError::invalid("memory-model update returned no scores"))?;
        for idx in 0..n {
            let evicted = &outcome.evicted[idx];
            let pos = &positions[idx];
            report.records.push(ReplayRecord {
                layer: idx / n_heads,
                head: idx % n_heads,
                chunk: u,
                step,
                absolute_columns: absolute[idx],
                retained: pos.iter().map(|p| !evicted.contains(p)).collect(),
                positions: pos.clone(),
                oldness: oldness[idx].clone(),
                scores: scores[idx].clone(),
                features: (0..features[idx].rows())
                    .map(|i| {
                        let mut fv = [0.0; crate::spectrogram::FEATURE_DIM];
                        fv.copy_from_slice(features[idx].row(i));
                        FeatureVector(fv)
                    })
                    .collect(),
            });
        }
    }
    Ok(report)
}
