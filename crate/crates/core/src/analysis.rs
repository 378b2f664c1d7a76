//! Post-hoc analyses of memory models: per-layer and per-task cache
//! profiles, score sensitivities to the input features, and dumps of which
//! tokens survive in the cache.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::cache::{CacheStats, KvCache};
use crate::error::{NammError, Result};
use crate::numerics::Matrix;
use crate::scorer::ModelWeights;
use crate::spectrogram::{FEATURE_DIM, N_BINS};

/// End-of-prompt cache statistics for one evaluated prompt, averaged over
/// each layer's heads.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptProfile {
    pub task: String,
    pub prompt_len: usize,
    pub layer_retained: Vec<f64>,
    pub layer_oldness: Vec<f64>,
}

impl PromptProfile {
    pub fn from_stats(task: &str, prompt_len: usize, stats: &CacheStats) -> Self {
        Self {
            task: task.to_string(),
            prompt_len,
            layer_retained: (0..stats.n_layers).map(|l| stats.layer_retained(l)).collect(),
            layer_oldness: (0..stats.n_layers).map(|l| stats.layer_oldness(l)).collect(),
        }
    }
}

/// Long-format row of `prompt_stats.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptStatRow {
    pub task: String,
    pub prompt: usize,
    pub prompt_len: usize,
    pub layer: usize,
    pub retained: f64,
    pub oldness: f64,
}

pub fn write_prompt_stats<W: Write>(w: W, profiles: &[PromptProfile]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for (i, p) in profiles.iter().enumerate() {
        for (layer, (&retained, &oldness)) in p.layer_retained.iter().zip(&p.layer_oldness).enumerate() {
            out.serialize(PromptStatRow {
                task: p.task.clone(),
                prompt: i,
                prompt_len: p.prompt_len,
                layer,
                retained,
                oldness,
            })
            .map_err(csv_error)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Inverse of [`write_prompt_stats`]; rows of one prompt must be
/// contiguous and list layers in order.
pub fn read_prompt_stats<R: Read>(r: R) -> Result<Vec<PromptProfile>> {
    let mut profiles: Vec<PromptProfile> = Vec::new();
    let mut last: Option<usize> = None;
    for (line, row) in csv::Reader::from_reader(r).deserialize::<PromptStatRow>().enumerate() {
        let row = row.map_err(csv_error)?;
        if last != Some(row.prompt) {
            profiles.push(PromptProfile {
                task: row.task.clone(),
                prompt_len: row.prompt_len,
                layer_retained: Vec::new(),
                layer_oldness: Vec::new(),
            });
            last = Some(row.prompt);
        }
        let p = profiles.last_mut().expect("pushed above");
        if row.layer != p.layer_retained.len() || row.task != p.task {
            return Err(NammError::invalid(format!(
                "prompt stats row {}: layer {} of prompt {} is out of order",
                line + 2,
                row.layer,
                row.prompt
            )));
        }
        p.layer_retained.push(row.retained);
        p.layer_oldness.push(row.oldness);
    }
    Ok(profiles)
}

fn csv_error(e: csv::Error) -> NammError {
    NammError::Io(std::io::Error::other(e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfileRow {
    pub layer: usize,
    pub norm_size: f64,
    pub norm_oldness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskProfileRow {
    pub task: String,
    pub n_prompts: usize,
    pub mean_prompt_len: f64,
    pub norm_size: f64,
    pub norm_oldness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTaskProfile {
    pub layers: Vec<LayerProfileRow>,
    pub tasks: Vec<TaskProfileRow>,
    /// Between per-task normalized size and mean prompt length; NaN when
    /// either series is constant or there are fewer than two tasks.
    pub size_length_pearson: f64,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Pearson correlation; NaN for mismatched, short or constant input.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    if x.len() != y.len() || x.len() < 2 {
        return f64::NAN;
    }
    let (mx, my) = (mean(x.iter().copied()), mean(y.iter().copied()));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// Per-layer profiles divide each task's layer means by that task's mean
/// over all prompts and layers, then average over tasks. Per-task
/// profiles divide the task means by the task's mean prompt length.
pub fn layer_task_profile(prompts: &[PromptProfile]) -> Result<LayerTaskProfile> {
    let n_layers = prompts.first().map_or(0, |p| p.layer_retained.len());
    if let Some(p) = prompts
        .iter()
        .find(|p| p.layer_retained.len() != n_layers || p.layer_oldness.len() != n_layers)
    {
        return Err(NammError::shape(format!(
            "prompt of task {} has {} layers, expected {n_layers}",
            p.task,
            p.layer_retained.len()
        )));
    }
    let mut by_task: BTreeMap<&str, Vec<&PromptProfile>> = BTreeMap::new();
    for p in prompts {
        by_task.entry(&p.task).or_default().push(p);
    }

    let mut layer_size = vec![Vec::new(); n_layers];
    let mut layer_old = vec![Vec::new(); n_layers];
    let mut tasks = Vec::new();
    for (task, ps) in &by_task {
        let size_l: Vec<f64> = (0..n_layers)
            .map(|l| mean(ps.iter().map(|p| p.layer_retained[l])))
            .collect();
        let old_l: Vec<f64> = (0..n_layers)
            .map(|l| mean(ps.iter().map(|p| p.layer_oldness[l])))
            .collect();
        let (size_avg, old_avg) = (mean(size_l.iter().copied()), mean(old_l.iter().copied()));
        for l in 0..n_layers {
            layer_size[l].push(size_l[l] / size_avg);
            layer_old[l].push(old_l[l] / old_avg);
        }
        let len = mean(ps.iter().map(|p| p.prompt_len as f64));
        tasks.push(TaskProfileRow {
            task: task.to_string(),
            n_prompts: ps.len(),
            mean_prompt_len: len,
            norm_size: size_avg / len,
            norm_oldness: old_avg / len,
        });
    }
    let layers = (0..n_layers)
        .map(|l| LayerProfileRow {
            layer: l,
            norm_size: mean(layer_size[l].iter().copied()),
            norm_oldness: mean(layer_old[l].iter().copied()),
        })
        .collect();
    let sizes: Vec<f64> = tasks.iter().map(|t| t.norm_size).collect();
    let lens: Vec<f64> = tasks.iter().map(|t| t.mean_prompt_len).collect();
    Ok(LayerTaskProfile {
        layers,
        tasks,
        size_length_pearson: pearson(&sizes, &lens),
    })
}

pub const SENSITIVITY_EPSILON: f64 = 1e-5;

/// Finite-difference sensitivities of every token score to every token's
/// features, for one snapshot of `n` feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityReport {
    pub n: usize,
    /// `∂s_i/∂v_j`, stored at `i * n + j`.
    pub jacobian: Vec<[f64; FEATURE_DIM]>,
    /// `|∂s_i/∂v_i[k]|` per token `i`.
    pub per_feature: Vec<[f64; FEATURE_DIM]>,
    /// `|∂s_i/∂v_j|²` at `(i, j)`.
    pub cross_grid: Matrix,
    /// `(∂s_i/∂v_j)·v_i` at `(i, j)`.
    pub self_dot: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSensitivity {
    pub feature: usize,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

impl SensitivityReport {
    pub fn gradient(&self, i: usize, j: usize) -> &[f64; FEATURE_DIM] {
        &self.jacobian[i * self.n + j]
    }

    pub fn feature_summary(&self) -> Vec<FeatureSensitivity> {
        (0..FEATURE_DIM)
            .map(|k| {
                let mut v: Vec<f64> = self.per_feature.iter().map(|g| g[k]).collect();
                v.sort_by(f64::total_cmp);
                let median = match v.len() {
                    0 => f64::NAN,
                    n if n % 2 == 1 => v[n / 2],
                    n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
                };
                FeatureSensitivity {
                    feature: k,
                    mean: mean(v.iter().copied()),
                    median,
                    max: v.last().copied().unwrap_or(f64::NAN),
                }
            })
            .collect()
    }

    /// Summed self-sensitivity of the spectral and positional blocks.
    pub fn block_totals(&self) -> (f64, f64) {
        let mut spectral = 0.0;
        let mut positional = 0.0;
        for g in &self.per_feature {
            spectral += g[..N_BINS].iter().sum::<f64>();
            positional += g[N_BINS..].iter().sum::<f64>();
        }
        (spectral, positional)
    }

    pub fn write_features_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in self.feature_summary() {
            out.serialize(row).map_err(csv_error)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Header `i,j,grad_sq,self_dot`.
    pub fn write_grid_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["i", "j", "grad_sq", "self_dot"]).map_err(csv_error)?;
        for i in 0..self.n {
            for j in 0..self.n {
                out.write_record([
                    i.to_string(),
                    j.to_string(),
                    self.cross_grid[(i, j)].to_string(),
                    self.self_dot[(i, j)].to_string(),
                ])
                .map_err(csv_error)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Central differences of the scores with step `epsilon` on every
/// coordinate of `features` (`n × 25`, oldest token first).
pub fn score_sensitivity(weights: &ModelWeights, features: &Matrix, epsilon: f64) -> Result<SensitivityReport> {
    if !(epsilon > 0.0) {
        return Err(NammError::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if features.cols() != FEATURE_DIM {
        return Err(NammError::shape(format!(
            "features have {} columns, expected {FEATURE_DIM}",
            features.cols()
        )));
    }
    let n = features.rows();
    let mut jacobian = vec![[0.0; FEATURE_DIM]; n * n];
    let mut x = features.clone();
    for j in 0..n {
        for k in 0..FEATURE_DIM {
            let orig = x[(j, k)];
            x[(j, k)] = orig + epsilon;
            let plus = weights.score(&x)?;
            x[(j, k)] = orig - epsilon;
            let minus = weights.score(&x)?;
            x[(j, k)] = orig;
            for i in 0..n {
                jacobian[i * n + j][k] = (plus[i] - minus[i]) / (2.0 * epsilon);
            }
        }
    }
    let per_feature = (0..n)
        .map(|i| {
            let mut g = jacobian[i * n + i];
            g.iter_mut().for_each(|v| *v = v.abs());
            g
        })
        .collect();
    let cross_grid = Matrix::from_fn(n, n, |i, j| jacobian[i * n + j].iter().map(|g| g * g).sum());
    let self_dot = Matrix::from_fn(n, n, |i, j| {
        jacobian[i * n + j].iter().zip(features.row(i)).map(|(g, v)| g * v).sum()
    });
    Ok(SensitivityReport {
        n,
        jacobian,
        per_feature,
        cross_grid,
        self_dot,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetainedToken {
    pub position: usize,
    pub token: u32,
    /// Heads of the layer still holding the token.
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRetention {
    pub layer: usize,
    pub n_heads: usize,
    pub tokens: Vec<RetainedToken>,
}

impl LayerRetention {
    /// Kept tokens in order; each run of dropped positions collapses to
    /// `[-k]`.
    pub fn render(&self, sequence: &[u32], name: impl Fn(u32) -> String) -> String {
        let kept: BTreeMap<usize, usize> = self.tokens.iter().map(|t| (t.position, t.heads)).collect();
        let mut parts = Vec::new();
        let mut dropped = 0;
        for (p, &tok) in sequence.iter().enumerate() {
            if kept.contains_key(&p) {
                if dropped > 0 {
                    parts.push(format!("[-{dropped}]"));
                    dropped = 0;
                }
                parts.push(name(tok));
            } else {
                dropped += 1;
            }
        }
        if dropped > 0 {
            parts.push(format!("[-{dropped}]"));
        }
        parts.join(" ")
    }
}

/// Tokens of `sequence` still present in each layer, with how many heads
/// keep them.
pub fn dump_retained(cache: &KvCache, sequence: &[u32]) -> Result<Vec<LayerRetention>> {
    let mut out = Vec::with_capacity(cache.n_layers());
    for layer in 0..cache.n_layers() {
        let mut heads: BTreeMap<usize, usize> = BTreeMap::new();
        for head in 0..cache.n_heads() {
            for p in cache.head(layer, head).positions() {
                *heads.entry(p).or_default() += 1;
            }
        }
        let tokens = heads
            .into_iter()
            .map(|(position, heads)| {
                let token = *sequence.get(position).ok_or_else(|| {
                    NammError::shape(format!(
                        "cache holds position {position} of a {}-token sequence",
                        sequence.len()
                    ))
                })?;
                Ok(RetainedToken { position, token, heads })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(LayerRetention {
            layer,
            n_heads: cache.n_heads(),
            tokens,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eviction::EvictionPolicy;
    use crate::lm::{LmConfig, LmWeights, NoObserver, Session};
    use crate::numerics::Rng;
    use crate::scorer::{decode_genome, param_count, ArchId, BamWeights, Genome, MlpWeights, BAM_HIDDEN};

    fn random_weights(arch: ArchId, seed: u64) -> ModelWeights {
        let mut rng = Rng::new(seed);
        let g = Genome::new(arch, (0..param_count(arch)).map(|_| rng.next_normal() * 0.4).collect()).unwrap();
        decode_genome(&g).unwrap()
    }

    fn random_features(n: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_fn(n, FEATURE_DIM, |_, _| rng.next_normal())
    }

    fn profile(task: &str, len: usize, retained: &[f64], oldness: &[f64]) -> PromptProfile {
        PromptProfile {
            task: task.into(),
            prompt_len: len,
            layer_retained: retained.to_vec(),
            layer_oldness: oldness.to_vec(),
        }
    }

    #[test]
    fn pearson_cases() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_nan());
        assert!(pearson(&[1.0], &[1.0]).is_nan());
        // By hand: sxy = 5.5, sxx = 5, syy = 8.75.
        let r = pearson(&[0.0, 1.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 5.0]);
        assert!((r - 5.5 / (5.0f64 * 8.75).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn full_cache_profile_is_one() {
        let cfg = LmConfig {
            vocab: 16,
            d_model: 16,
            n_heads: 2,
            n_layers: 3,
            d_ff: 32,
            max_context: 256,
        };
        let w = LmWeights::init(cfg, 4).unwrap();
        let mut prompts = Vec::new();
        for (i, len) in [40usize, 64, 100, 77].into_iter().enumerate() {
            let mut s = Session::new(&w, EvictionPolicy::Full, 32).unwrap();
            let toks: Vec<u32> = (0..len).map(|t| (t % 16) as u32).collect();
            s.feed(&toks, &mut NoObserver).unwrap();
            let task = if i % 2 == 0 { "a" } else { "b" };
            prompts.push(PromptProfile::from_stats(task, len, &s.cache().stats(s.step())));
        }
        let p = layer_task_profile(&prompts).unwrap();
        for l in &p.layers {
            assert!((l.norm_size - 1.0).abs() < 1e-12);
        }
        for t in &p.tasks {
            assert!((t.norm_size - 1.0).abs() < 1e-12);
        }
        assert!(p.size_length_pearson.is_nan());
    }

    #[test]
    fn single_layer_hand_count() {
        // Three prompts, one layer. Task x: sizes 10 and 30 at lengths 40
        // and 60; task y: size 20 at length 80.
        let prompts = vec![
            profile("x", 40, &[10.0], &[4.0]),
            profile("x", 60, &[30.0], &[8.0]),
            profile("y", 80, &[20.0], &[10.0]),
        ];
        let p = layer_task_profile(&prompts).unwrap();
        assert_eq!(p.layers.len(), 1);
        assert!((p.layers[0].norm_size - 1.0).abs() < 1e-15);
        let x = &p.tasks[0];
        assert_eq!((x.task.as_str(), x.n_prompts), ("x", 2));
        assert!((x.mean_prompt_len - 50.0).abs() < 1e-15);
        assert!((x.norm_size - 20.0 / 50.0).abs() < 1e-15);
        assert!((x.norm_oldness - 6.0 / 50.0).abs() < 1e-15);
        let y = &p.tasks[1];
        assert!((y.norm_size - 20.0 / 80.0).abs() < 1e-15);
        // Two tasks: sizes fall as length grows.
        assert!((p.size_length_pearson + 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_profile_normalizes_within_task() {
        let prompts = vec![
            profile("x", 64, &[10.0, 30.0], &[1.0, 3.0]),
            profile("y", 64, &[100.0, 100.0], &[5.0, 5.0]),
        ];
        let p = layer_task_profile(&prompts).unwrap();
        // Task x gives 0.5 and 1.5, task y gives 1 and 1.
        assert!((p.layers[0].norm_size - 0.75).abs() < 1e-15);
        assert!((p.layers[1].norm_size - 1.25).abs() < 1e-15);
        assert!((p.layers[0].norm_oldness - 0.75).abs() < 1e-15);
        let bad = vec![profile("x", 64, &[1.0], &[1.0]), profile("x", 64, &[1.0, 2.0], &[1.0, 2.0])];
        assert!(layer_task_profile(&bad).is_err());
    }

    #[test]
    fn prompt_stats_round_trip() {
        let prompts = vec![
            profile("passkey", 128, &[10.5, 30.25], &[1.0, 3.5]),
            profile("dedup_qa", 96, &[7.0, 8.0], &[0.0, 2.0]),
        ];
        let mut buf = Vec::new();
        write_prompt_stats(&mut buf, &prompts).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("task,prompt,prompt_len,layer,retained,oldness\n"));
        assert_eq!(read_prompt_stats(&buf[..]).unwrap(), prompts);
    }

    #[test]
    fn mlp_cross_grid_is_diagonal() {
        let w = random_weights(ArchId::Mlp, 1);
        let r = score_sensitivity(&w, &random_features(6, 2), SENSITIVITY_EPSILON).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    assert_eq!(r.cross_grid[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn bam_grid_is_zero_below_diagonal() {
        for seed in 0..5 {
            let w = random_weights(ArchId::Bam, seed);
            let r = score_sensitivity(&w, &random_features(8, seed + 10), SENSITIVITY_EPSILON).unwrap();
            let mut upper = 0.0;
            for i in 0..8 {
                for j in 0..8 {
                    if j < i {
                        assert_eq!(r.cross_grid[(i, j)], 0.0);
                        assert_eq!(r.self_dot[(i, j)], 0.0);
                    } else if j > i {
                        upper += r.cross_grid[(i, j)];
                    }
                }
                assert!(r.cross_grid[(i, i)] > 0.0);
            }
            assert!(upper > 0.0);
            assert!(r.cross_grid.data().iter().all(|&g| g >= 0.0));
        }
    }

    fn relu(x: f64) -> f64 {
        x.max(0.0)
    }

    /// Gradient of a lone token's BAM score. Attention over one token is 1,
    /// so `o = (x Wv + bv) Wo + bo`, split into `r` and `m`, and
    /// `s = Σ_c (x_c + r_c) relu(m_c) wf_c + bf`.
    fn bam_single_gradient(w: &BamWeights, x: &[f64]) -> [f64; FEATURE_DIM] {
        let d = FEATURE_DIM;
        let mut v = w.value.bias.clone();
        for h in 0..BAM_HIDDEN {
            for a in 0..d {
                v[h] += x[a] * w.value.weight[(a, h)];
            }
        }
        let mut o = w.out.bias.clone();
        for (c, oc) in o.iter_mut().enumerate() {
            for h in 0..BAM_HIDDEN {
                *oc += v[h] * w.out.weight[(h, c)];
            }
        }
        // do_c / dx_a = Σ_h Wv[a, h] Wo[h, c].
        let dodx = |a: usize, c: usize| (0..BAM_HIDDEN).map(|h| w.value.weight[(a, h)] * w.out.weight[(h, c)]).sum::<f64>();
        let mut g = [0.0; FEATURE_DIM];
        for (a, ga) in g.iter_mut().enumerate() {
            for c in 0..d {
                let (r, m) = (o[c], o[d + c]);
                let dr = dodx(a, c) + if a == c { 1.0 } else { 0.0 };
                let dm = if m > 0.0 { dodx(a, d + c) } else { 0.0 };
                *ga += w.final_w[c] * (relu(m) * dr + (x[c] + r) * dm);
            }
        }
        g
    }

    /// `h1 = relu(x W1 + b1) + x`, `h2 = relu(h1 W2 + b2) + h1`, `s = h2·wf + bf`.
    fn mlp_gradient(w: &MlpWeights, x: &[f64]) -> [f64; FEATURE_DIM] {
        let d = FEATURE_DIM;
        let pre1: Vec<f64> = (0..d)
            .map(|c| w.hidden1.bias[c] + (0..d).map(|a| x[a] * w.hidden1.weight[(a, c)]).sum::<f64>())
            .collect();
        let h1: Vec<f64> = (0..d).map(|c| relu(pre1[c]) + x[c]).collect();
        let pre2: Vec<f64> = (0..d)
            .map(|c| w.hidden2.bias[c] + (0..d).map(|a| h1[a] * w.hidden2.weight[(a, c)]).sum::<f64>())
            .collect();
        // ds/dh1 = wf + W2 diag(1[pre2 > 0]) wf; ds/dx = ds/dh1 + W1 diag(1[pre1 > 0]) ds/dh1.
        let dh1: Vec<f64> = (0..d)
            .map(|a| w.final_w[a] + (0..d).filter(|&c| pre2[c] > 0.0).map(|c| w.hidden2.weight[(a, c)] * w.final_w[c]).sum::<f64>())
            .collect();
        let mut g = [0.0; FEATURE_DIM];
        for (a, ga) in g.iter_mut().enumerate() {
            *ga = dh1[a] + (0..d).filter(|&c| pre1[c] > 0.0).map(|c| w.hidden1.weight[(a, c)] * dh1[c]).sum::<f64>();
        }
        g
    }

    #[test]
    fn bam_self_gradient_matches_analytic() {
        for seed in 0..10 {
            let w = random_weights(ArchId::Bam, 100 + seed);
            let x = random_features(1, 200 + seed);
            let r = score_sensitivity(&w, &x, SENSITIVITY_EPSILON).unwrap();
            let ModelWeights::Bam(bw) = &w else { unreachable!() };
            let g = bam_single_gradient(bw, x.row(0));
            for k in 0..FEATURE_DIM {
                let fd = r.gradient(0, 0)[k];
                assert!((fd - g[k]).abs() <= 1e-5 * g[k].abs().max(1.0), "seed {seed} k {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn mlp_gradient_matches_analytic() {
        let w = random_weights(ArchId::Mlp, 7);
        let x = random_features(4, 8);
        let r = score_sensitivity(&w, &x, SENSITIVITY_EPSILON).unwrap();
        let ModelWeights::Mlp(mw) = &w else { unreachable!() };
        for i in 0..4 {
            let g = mlp_gradient(mw, x.row(i));
            for k in 0..FEATURE_DIM {
                assert!((r.gradient(i, i)[k] - g[k]).abs() <= 1e-5 * g[k].abs().max(1.0));
                assert_eq!(r.per_feature[i][k], r.gradient(i, i)[k].abs());
            }
        }
    }

    #[test]
    fn feature_summary_and_blocks() {
        let w = random_weights(ArchId::Bam, 3);
        let r = score_sensitivity(&w, &random_features(5, 4), SENSITIVITY_EPSILON).unwrap();
        let s = r.feature_summary();
        assert_eq!(s.len(), FEATURE_DIM);
        for f in &s {
            assert!(f.mean >= 0.0 && f.median >= 0.0 && f.max >= f.median);
        }
        let (spec, pos) = r.block_totals();
        let total: f64 = r.per_feature.iter().flat_map(|g| g.iter()).sum();
        assert!((spec + pos - total).abs() < 1e-9 * total.max(1.0));
        assert!(score_sensitivity(&w, &random_features(2, 1), 0.0).is_err());
    }

    #[test]
    fn dump_counts_match_stats() {
        let cfg = LmConfig {
            vocab: 16,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            max_context: 256,
        };
        let w = LmWeights::init(cfg, 9).unwrap();
        let toks: Vec<u32> = (0..90).map(|t| (t * 7 % 16) as u32).collect();
        for policy in [EvictionPolicy::Full, EvictionPolicy::L2 { budget: 20 }] {
            let mut s = Session::new(&w, policy.clone(), 32).unwrap();
            s.feed(&toks, &mut NoObserver).unwrap();
            let dump = dump_retained(s.cache(), &toks).unwrap();
            let stats = s.cache().stats(s.step());
            for l in &dump {
                let held: usize = l.tokens.iter().map(|t| t.heads).sum();
                assert_eq!(held as f64 / 2.0, stats.layer_retained(l.layer));
                for t in &l.tokens {
                    assert_eq!(t.token, toks[t.position]);
                }
            }
            if matches!(policy, EvictionPolicy::Full) {
                assert!(dump.iter().all(|l| l.tokens.len() == 90 && l.tokens.iter().all(|t| t.heads == 2)));
            }
            let mut again = Session::new(&w, policy, 32).unwrap();
            again.feed(&toks, &mut NoObserver).unwrap();
            assert_eq!(dump_retained(again.cache(), &toks).unwrap(), dump);
        }
    }

    #[test]
    fn render_collapses_dropped_runs() {
        let l = LayerRetention {
            layer: 0,
            n_heads: 1,
            tokens: vec![
                RetainedToken { position: 1, token: 5, heads: 1 },
                RetainedToken { position: 4, token: 6, heads: 1 },
            ],
        };
        assert_eq!(l.render(&[9, 5, 9, 9, 6, 9], |t| t.to_string()), "[-1] 5 [-2] 6 [-1]");
    }
}
