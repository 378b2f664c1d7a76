//! Eviction policies: the learned memory model and the hand-designed
//! baselines (recency, L2 key norm, heavy-hitter attention, FastGen-lite).
//!
//! Every policy runs on the same cadence, once per `n_up` processed tokens,
//! and sees the attention rows of the queries processed since the previous
//! update, one matrix per (layer, head).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cache::{HeadCache, KvCache};
use crate::error::{NammError, Result};
use crate::numerics::Matrix;
use crate::scorer::{decode_genome, MemoryModel, ModelWeights};
use crate::spectrogram::{EmaState, FeaturePipeline, FEATURE_DIM};

/// Whether learned eviction decides per head or once per layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    PerHead,
    /// Scores are averaged over a layer's heads and all heads evict together.
    PerLayer,
}

/// A decoded memory model ready to score cache tokens.
#[derive(Clone, Debug)]
pub struct NammScorer {
    pub weights: ModelWeights,
    pub pipeline: FeaturePipeline,
    pub threshold_offset: f64,
    pub granularity: Granularity,
}

impl NammScorer {
    pub fn new(model: &MemoryModel, n_w: usize, s_w: usize, gamma: f64) -> Result<Self> {
        Ok(Self {
            weights: decode_genome(&model.genome)?,
            pipeline: FeaturePipeline::new(n_w, s_w, gamma, model.scales)?,
            threshold_offset: model.threshold_offset,
            granularity: Granularity::PerHead,
        })
    }

    pub fn with_granularity(mut self, granularity: Granularity) -> Self {
        self.granularity = granularity;
        self
    }

    /// Retention test applied to raw scores.
    #[inline]
    pub fn keeps(&self, score: f64) -> bool {
        score + self.threshold_offset >= 0.0
    }
}

fn check_alignment(head: &HeadCache, attn_chunk: &Matrix) -> Result<()> {
    if attn_chunk.cols() != head.len() {
        return Err(NammError::shape(format!(
            "attention chunk has {} columns for {} cached tokens",
            attn_chunk.cols(),
            head.len()
        )));
    }
    Ok(())
}

/// Feature rows for every token of one head and the reduction states they
/// came from. Leaves the head untouched.
pub fn namm_features(
    head: &HeadCache,
    attn_chunk: &Matrix,
    pipeline: &FeaturePipeline,
    step: u64,
) -> Result<(Matrix, Vec<EmaState>)> {
    check_alignment(head, attn_chunk)?;
    let n = head.len();
    let rows = attn_chunk.rows();
    let mut features = Matrix::zeros(n, FEATURE_DIM);
    let mut column = vec![0.0; rows];
    let mut states = Vec::with_capacity(n);
    for (i, meta) in head.meta().iter().enumerate() {
        for (r, c) in column.iter_mut().enumerate() {
            *c = attn_chunk[(r, i)];
        }
        let state = pipeline.reduce(&column, &meta.ema)?;
        let fv = pipeline.features_from_state(&state, step.saturating_sub(meta.birth_step));
        features.row_mut(i).copy_from_slice(&fv.0);
        states.push(state);
    }
    Ok((features, states))
}

/// Scores every token of one head from its attention column, carrying the
/// reduction state forward in the token metadata. Returns the raw scores.
pub fn namm_scores(head: &mut HeadCache, attn_chunk: &Matrix, scorer: &NammScorer, step: u64) -> Result<Vec<f64>> {
    let (features, states) = namm_features(head, attn_chunk, &scorer.pipeline, step)?;
    let scores = scorer.weights.score(&features)?;
    for ((meta, state), &s) in head.meta_mut().iter_mut().zip(states).zip(&scores) {
        meta.ema = state;
        meta.last_score = s;
    }
    Ok(scores)
}

/// Learned eviction for one head: evict every token with
/// `score + offset < 0`. Returns evicted original positions.
pub fn namm_update(
    cache: &mut KvCache,
    layer: usize,
    head: usize,
    attn_chunk: &Matrix,
    scorer: &NammScorer,
    step: u64,
) -> Result<Vec<usize>> {
    let h = cache.head_mut(layer, head);
    let scores = namm_scores(h, attn_chunk, scorer, step)?;
    let keep: Vec<bool> = scores.iter().map(|&s| scorer.keeps(s)).collect();
    h.retain(&keep)
}

/// Keep flags for L2 eviction: drop the `n - budget` tokens whose keys have
/// the largest L2 norm, evicting the older token on ties.
pub fn l2_keep_flags(head: &HeadCache, budget: usize) -> Vec<bool> {
    let n = head.len();
    let mut keep = vec![true; n];
    if n <= budget {
        return keep;
    }
    let norms: Vec<f64> = (0..n)
        .map(|i| head.key(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    for &i in &order[..n - budget] {
        keep[i] = false;
    }
    keep
}

pub fn l2_evict(cache: &mut KvCache, layer: usize, head: usize, budget: usize) -> Result<Vec<usize>> {
    if budget == 0 {
        return Err(NammError::invalid("L2 budget must be at least 1"));
    }
    let h = cache.head_mut(layer, head);
    let keep = l2_keep_flags(h, budget);
    h.retain(&keep)
}

/// Keep flags for heavy-hitter eviction: the `recent_window` newest tokens,
/// then the highest cumulative attention among the rest up to `budget`,
/// preferring the newer token on ties.
pub fn h2o_keep_flags(cum_attn: &[f64], budget: usize, recent_window: usize) -> Vec<bool> {
    let n = cum_attn.len();
    let mut keep = vec![true; n];
    if n <= budget {
        return keep;
    }
    let window = recent_window.min(n);
    let older = n - window;
    let mut order: Vec<usize> = (0..older).collect();
    order.sort_by(|&a, &b| cum_attn[b].total_cmp(&cum_attn[a]).then(b.cmp(&a)));
    let heavy = budget - window;
    for &i in &order[heavy.min(older)..] {
        keep[i] = false;
    }
    keep
}

pub fn h2o_evict(
    cache: &mut KvCache,
    layer: usize,
    head: usize,
    cum_attn: &[f64],
    budget: usize,
    recent_window: usize,
) -> Result<Vec<usize>> {
    if budget < recent_window {
        return Err(NammError::invalid(format!(
            "H2O budget {budget} is smaller than its recent window {recent_window}"
        )));
    }
    let h = cache.head_mut(layer, head);
    if cum_attn.len() != h.len() {
        return Err(NammError::shape(format!(
            "{} cumulative scores for {} tokens",
            cum_attn.len(),
            h.len()
        )));
    }
    let keep = h2o_keep_flags(cum_attn, budget, recent_window);
    h.retain(&keep)
}

pub fn recency_keep_flags(n: usize, budget: usize) -> Vec<bool> {
    (0..n).map(|i| i + budget >= n).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FastGenStrategy {
    Full,
    Recency,
    TopAttention,
    RecencyAndTopAttention,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FastGenConfig {
    pub threshold: f64,
    pub recency_ratio: f64,
    pub attention_ratio: f64,
}

impl Default for FastGenConfig {
    fn default() -> Self {
        Self {
            threshold: 0.999,
            recency_ratio: 0.3,
            attention_ratio: 0.3,
        }
    }
}

impl FastGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(NammError::invalid(format!(
                "FastGen threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        for (name, r) in [("recency", self.recency_ratio), ("attention", self.attention_ratio)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(NammError::invalid(format!("FastGen {name} ratio {r} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Keep flags for a FastGen strategy. Ratios are fractions of all tokens
/// seen so far (`n_seen`), so repeated application does not compound.
pub fn fastgen_keep_flags(
    strategy: FastGenStrategy,
    cum_attn: &[f64],
    n_seen: usize,
    cfg: &FastGenConfig,
) -> Vec<bool> {
    let n = cum_attn.len();
    let quota = |ratio: f64| ((ratio * n_seen as f64).ceil() as usize).min(n);
    let recent = || recency_keep_flags(n, quota(cfg.recency_ratio));
    let top = || {
        let k = quota(cfg.attention_ratio);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| cum_attn[b].total_cmp(&cum_attn[a]).then(b.cmp(&a)));
        let mut keep = vec![false; n];
        for &i in &order[..k] {
            keep[i] = true;
        }
        keep
    };
    match strategy {
        FastGenStrategy::Full => vec![true; n],
        FastGenStrategy::Recency => recent(),
        FastGenStrategy::TopAttention => top(),
        FastGenStrategy::RecencyAndTopAttention => recent().iter().zip(top()).map(|(a, b)| *a || b).collect(),
    }
}

/// Mean over query rows of `‖A_i − Â_i‖₂`, where `Â` renormalizes each row
/// over the kept keys (an all-evicted row reconstructs as zeros).
pub fn reconstruction_error(attn: &Matrix, keep: &[bool]) -> f64 {
    let mut total = 0.0;
    for i in 0..attn.rows() {
        let row = attn.row(i);
        let kept: f64 = row.iter().zip(keep).filter(|(_, &k)| k).map(|(v, _)| v).sum();
        let mut sq = 0.0;
        for (v, &k) in row.iter().zip(keep) {
            let rec = if k && kept > 0.0 { v / kept } else { 0.0 };
            sq += (v - rec).powi(2);
        }
        total += sq.sqrt();
    }
    total / attn.rows().max(1) as f64
}

/// Profiling step: among the candidate strategies, ordered from most to
/// fewest evictions, pick the first whose reconstruction error on `attn`
/// is below `1 - T`; fall back to the full cache.
pub fn fastgen_profile(attn: &Matrix, cfg: &FastGenConfig) -> FastGenStrategy {
    let n = attn.cols();
    let cum: Vec<f64> = (0..n).map(|j| (0..attn.rows()).map(|i| attn[(i, j)]).sum()).collect();
    let mut candidates: Vec<(FastGenStrategy, Vec<bool>)> = [
        FastGenStrategy::Recency,
        FastGenStrategy::TopAttention,
        FastGenStrategy::RecencyAndTopAttention,
        FastGenStrategy::Full,
    ]
    .into_iter()
    .map(|s| (s, fastgen_keep_flags(s, &cum, n, cfg)))
    .collect();
    candidates.sort_by_key(|(_, keep)| std::cmp::Reverse(keep.iter().filter(|&&k| !k).count()));
    let bound = 1.0 - cfg.threshold;
    for (strategy, keep) in &candidates {
        if *strategy == FastGenStrategy::Full || reconstruction_error(attn, keep) < bound {
            return *strategy;
        }
    }
    FastGenStrategy::Full
}

/// Serializable policy choice; `Namm` is resolved against a genome file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Full,
    Recency { budget: usize },
    L2 { budget: usize },
    H2o { budget: usize, recent_window: usize },
    FastGen(FastGenConfig),
    Namm,
}

/// A runnable eviction policy.
#[derive(Clone, Debug)]
pub enum EvictionPolicy {
    Full,
    Recency { budget: usize },
    L2 { budget: usize },
    H2o { budget: usize, recent_window: usize },
    FastGen(FastGenConfig),
    Namm(Arc<NammScorer>),
}

impl EvictionPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            EvictionPolicy::Recency { budget } | EvictionPolicy::L2 { budget } if *budget == 0 => {
                Err(NammError::invalid("budget must be at least 1"))
            }
            EvictionPolicy::H2o { budget, recent_window } if budget < recent_window || *budget == 0 => {
                Err(NammError::invalid(format!(
                    "H2O budget {budget} must be positive and at least the recent window {recent_window}"
                )))
            }
            EvictionPolicy::FastGen(cfg) => cfg.validate(),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EvictionPolicy::Full => "full",
            EvictionPolicy::Recency { .. } => "recency",
            EvictionPolicy::L2 { .. } => "l2",
            EvictionPolicy::H2o { .. } => "h2o",
            EvictionPolicy::FastGen(_) => "fastgen",
            EvictionPolicy::Namm(_) => "namm",
        }
    }

    pub fn needs_attention(&self) -> bool {
        !matches!(
            self,
            EvictionPolicy::Full | EvictionPolicy::Recency { .. } | EvictionPolicy::L2 { .. }
        )
    }
}

/// Per-sequence mutable policy state.
#[derive(Clone, Debug, Default)]
pub struct PolicyState {
    /// FastGen strategy chosen at profiling time, per (layer, head).
    pub fastgen: Vec<Option<FastGenStrategy>>,
}

/// Outcome of one update across all heads, indexed `layer * n_heads + head`.
#[derive(Clone, Debug, Default)]
pub struct UpdateOutcome {
    pub evicted: Vec<Vec<usize>>,
    /// Raw memory-model scores, aligned with the pre-eviction token order.
    pub scores: Option<Vec<Vec<f64>>>,
}

/// Runs `policy` on every head. `attn_chunks[layer * n_heads + head]` holds
/// the attention rows since the previous update over the head's current
/// tokens; `step` is the number of tokens processed so far.
pub fn apply_update(
    policy: &EvictionPolicy,
    state: &mut PolicyState,
    cache: &mut KvCache,
    attn_chunks: &[Matrix],
    step: u64,
) -> Result<UpdateOutcome> {
    let (n_layers, n_heads) = (cache.n_layers(), cache.n_heads());
    let n = n_layers * n_heads;
    if policy.needs_attention() && attn_chunks.len() != n {
        return Err(NammError::shape(format!(
            "{} attention chunks for {n} heads",
            attn_chunks.len()
        )));
    }
    let mut outcome = UpdateOutcome {
        evicted: vec![Vec::new(); n],
        scores: None,
    };
    match policy {
        EvictionPolicy::Full => {}
        EvictionPolicy::Recency { budget } => {
            for idx in 0..n {
                let h = cache.head_mut(idx / n_heads, idx % n_heads);
                let keep = recency_keep_flags(h.len(), *budget);
                outcome.evicted[idx] = h.retain(&keep)?;
            }
        }
        EvictionPolicy::L2 { budget } => {
            for idx in 0..n {
                outcome.evicted[idx] = l2_evict(cache, idx / n_heads, idx % n_heads, *budget)?;
            }
        }
        EvictionPolicy::H2o { budget, recent_window } => {
            for idx in 0..n {
                let (layer, head) = (idx / n_heads, idx % n_heads);
                let cum: Vec<f64> = cache.head(layer, head).meta().iter().map(|m| m.cum_attn).collect();
                outcome.evicted[idx] = h2o_evict(cache, layer, head, &cum, *budget, *recent_window)?;
            }
        }
        EvictionPolicy::FastGen(cfg) => {
            if state.fastgen.len() != n {
                state.fastgen = vec![None; n];
            }
            for idx in 0..n {
                let h = cache.head_mut(idx / n_heads, idx % n_heads);
                check_alignment(h, &attn_chunks[idx])?;
                let strategy = *state.fastgen[idx].get_or_insert_with(|| fastgen_profile(&attn_chunks[idx], cfg));
                let cum: Vec<f64> = h.meta().iter().map(|m| m.cum_attn).collect();
                let keep = fastgen_keep_flags(strategy, &cum, step as usize, cfg);
                outcome.evicted[idx] = h.retain(&keep)?;
            }
        }
        EvictionPolicy::Namm(scorer) => {
            let mut all_scores = Vec::with_capacity(n);
            match scorer.granularity {
                Granularity::PerHead => {
                    for idx in 0..n {
                        let h = cache.head_mut(idx / n_heads, idx % n_heads);
                        let scores = namm_scores(h, &attn_chunks[idx], scorer, step)?;
                        let keep: Vec<bool> = scores.iter().map(|&s| scorer.keeps(s)).collect();
                        outcome.evicted[idx] = h.retain(&keep)?;
                        all_scores.push(scores);
                    }
                }
                Granularity::PerLayer => {
                    for layer in 0..n_layers {
                        let positions = cache.head(layer, 0).positions();
                        let mut mean = vec![0.0; positions.len()];
                        for head in 0..n_heads {
                            let h = cache.head_mut(layer, head);
                            if h.positions() != positions {
                                return Err(NammError::invalid(
                                    "per-layer eviction needs identical token sets across heads",
                                ));
                            }
                            let idx = layer * n_heads + head;
                            let scores = namm_scores(h, &attn_chunks[idx], scorer, step)?;
                            for (m, s) in mean.iter_mut().zip(&scores) {
                                *m += s / n_heads as f64;
                            }
                            all_scores.push(scores);
                        }
                        let keep: Vec<bool> = mean.iter().map(|&s| scorer.keeps(s)).collect();
                        for head in 0..n_heads {
                            outcome.evicted[layer * n_heads + head] = cache.head_mut(layer, head).retain(&keep)?;
                        }
                    }
                }
            }
            outcome.scores = Some(all_scores);
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{masked_softmax, Mask, Rng};
    use crate::scorer::{ArchId, Genome};
    use crate::spectrogram::NormScales;

    fn filled_head(n: usize, d: usize, rng: &mut Rng) -> HeadCache {
        let mut h = HeadCache::new(d);
        let k = Matrix::from_fn(n, d, |_, _| rng.next_normal());
        h.append(&k, &k, n as u64).unwrap();
        h
    }

    fn zero_scorer(arch: ArchId) -> NammScorer {
        NammScorer::new(&MemoryModel::new(Genome::zeros(arch), NormScales::default()), 32, 16, 0.85).unwrap()
    }

    fn random_attention(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        // Causal attention for the last `rows` queries over `cols` keys.
        let logits = Matrix::from_fn(rows, cols, |_, _| rng.next_normal() * 2.0);
        let offset = cols - rows;
        masked_softmax(&logits, &Mask::from_fn(rows, cols, |i, j| j <= i + offset)).unwrap()
    }

    #[test]
    fn zero_genome_evicts_nothing() {
        let mut rng = Rng::new(1);
        let mut cache = KvCache::new(1, 1, 4);
        let k = Matrix::from_fn(32, 4, |_, _| rng.next_normal());
        cache.append(0, 0, &k, &k, 32).unwrap();
        let attn = random_attention(&mut rng, 32, 32);
        let ev = namm_update(&mut cache, 0, 0, &attn, &zero_scorer(ArchId::Bam), 32).unwrap();
        assert!(ev.is_empty());
        assert_eq!(cache.head(0, 0).len(), 32);
        assert!(cache.head(0, 0).meta().iter().all(|m| m.last_score == 0.0 && m.ema.chunk_count == 1));
    }

    #[test]
    fn retention_rule_keeps_non_negative_scores() {
        // A genome whose score is exactly the final bias lets us pin scores.
        let mut scorer = zero_scorer(ArchId::Mlp);
        for (b, expected) in [(0.2, true), (-0.1, false), (0.0, true)] {
            if let ModelWeights::Mlp(w) = &mut scorer.weights {
                w.final_b = b;
            }
            assert_eq!(scorer.keeps(b), expected);
        }
        let mut rng = Rng::new(2);
        let mut cache = KvCache::new(1, 1, 2);
        let k = Matrix::from_fn(32, 2, |_, _| rng.next_normal());
        cache.append(0, 0, &k, &k, 32).unwrap();
        if let ModelWeights::Mlp(w) = &mut scorer.weights {
            w.final_b = -0.1;
        }
        let attn = random_attention(&mut rng, 32, 32);
        let ev = namm_update(&mut cache, 0, 0, &attn, &scorer, 32).unwrap();
        assert_eq!(ev.len(), 32);
        scorer.threshold_offset = 0.1;
        let mut cache2 = KvCache::new(1, 1, 2);
        cache2.append(0, 0, &k, &k, 32).unwrap();
        assert!(namm_update(&mut cache2, 0, 0, &attn, &scorer, 32).unwrap().is_empty());
    }

    #[test]
    fn misaligned_chunk_is_an_error() {
        let mut rng = Rng::new(3);
        let mut cache = KvCache::new(1, 1, 2);
        let k = Matrix::from_fn(10, 2, |_, _| rng.next_normal());
        cache.append(0, 0, &k, &k, 10).unwrap();
        let attn = Matrix::zeros(32, 9);
        assert!(namm_update(&mut cache, 0, 0, &attn, &zero_scorer(ArchId::Bam), 32).is_err());
    }

    #[test]
    fn l2_examples() {
        let mut h = HeadCache::new(1);
        let k = Matrix::from_vec(3, 1, vec![1.0, 5.0, 2.0]).unwrap();
        h.append(&k, &k, 3).unwrap();
        assert_eq!(l2_keep_flags(&h, 3), vec![true; 3]);
        assert_eq!(l2_keep_flags(&h, 2), vec![true, false, true]);
        let mut h = HeadCache::new(1);
        let k = Matrix::from_vec(3, 1, vec![2.0, 2.0, 1.0]).unwrap();
        h.append(&k, &k, 3).unwrap();
        assert_eq!(l2_keep_flags(&h, 2), vec![false, true, true]);
    }

    #[test]
    fn l2_matches_sort_oracle() {
        let mut rng = Rng::new(4);
        for budget in [1, 10, 40, 63, 64, 80] {
            let h = filled_head(64, 8, &mut rng);
            let keep = l2_keep_flags(&h, budget);
            // Oracle: keep the `budget` smallest norms.
            let mut norms: Vec<(f64, usize)> = (0..64)
                .map(|i| (h.key(i).iter().map(|v| v * v).sum::<f64>().sqrt(), i))
                .collect();
            norms.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut expected = vec![false; 64];
            for &(_, i) in norms.iter().take(budget) {
                expected[i] = true;
            }
            assert_eq!(keep, expected);
        }
    }

    #[test]
    fn h2o_examples() {
        assert_eq!(h2o_keep_flags(&[3.0, 1.0, 2.0, 0.5], 4, 1), vec![true; 4]);
        assert_eq!(h2o_keep_flags(&[3.0, 1.0, 2.0, 0.5], 2, 1), vec![true, false, false, true]);
        // Ties keep the newer token.
        assert_eq!(h2o_keep_flags(&[1.0, 1.0, 0.0], 2, 1), vec![false, true, true]);
    }

    #[test]
    fn h2o_matches_brute_force() {
        let mut rng = Rng::new(5);
        for (budget, window) in [(16, 4), (32, 0), (63, 10), (8, 8)] {
            let cum: Vec<f64> = (0..64).map(|_| rng.next_f64()).collect();
            let keep = h2o_keep_flags(&cum, budget, window);
            // Brute force: the best set must contain the window and maximize
            // the sum of kept scores among the rest.
            let mut rest: Vec<usize> = (0..64 - window).collect();
            rest.sort_by(|&a, &b| cum[b].partial_cmp(&cum[a]).unwrap());
            let mut expected = vec![false; 64];
            for i in 64 - window..64 {
                expected[i] = true;
            }
            for &i in rest.iter().take(budget - window) {
                expected[i] = true;
            }
            assert_eq!(keep, expected);
            assert_eq!(keep.iter().filter(|&&k| k).count(), budget);
        }
    }

    #[test]
    fn h2o_rejects_budget_below_window() {
        let mut cache = KvCache::new(1, 1, 1);
        assert!(h2o_evict(&mut cache, 0, 0, &[], 2, 3).is_err());
    }

    #[test]
    fn fastgen_threshold_limits() {
        let mut rng = Rng::new(6);
        let attn = random_attention(&mut rng, 32, 32);
        let loose = FastGenConfig {
            threshold: 1e-9,
            ..Default::default()
        };
        // Recency and top-attention both keep 10 of 32 here; sorting is
        // stable, so recency is the most aggressive candidate.
        assert_eq!(fastgen_profile(&attn, &loose), FastGenStrategy::Recency);
        let strict = FastGenConfig {
            threshold: 1.0 - 1e-15,
            ..Default::default()
        };
        assert_eq!(fastgen_profile(&attn, &strict), FastGenStrategy::Full);
    }

    #[test]
    fn fastgen_matches_exhaustive_evaluation() {
        let mut rng = Rng::new(7);
        for t in [0.5, 0.8, 0.9, 0.95, 0.99] {
            let attn = random_attention(&mut rng, 8, 8);
            let cfg = FastGenConfig {
                threshold: t,
                recency_ratio: 0.5,
                attention_ratio: 0.25,
            };
            let chosen = fastgen_profile(&attn, &cfg);
            // Exhaustive: among strategies meeting the bound, the most evictions.
            let cum: Vec<f64> = (0..8).map(|j| attn.column(j).iter().sum()).collect();
            let mut best: Option<(usize, FastGenStrategy)> = None;
            for s in [
                FastGenStrategy::Recency,
                FastGenStrategy::TopAttention,
                FastGenStrategy::RecencyAndTopAttention,
                FastGenStrategy::Full,
            ] {
                let keep = fastgen_keep_flags(s, &cum, 8, &cfg);
                let evicted = keep.iter().filter(|&&k| !k).count();
                let ok = s == FastGenStrategy::Full || reconstruction_error(&attn, &keep) < 1.0 - t;
                if ok && best.map_or(true, |(e, _)| evicted > e) {
                    best = Some((evicted, s));
                }
            }
            let chosen_count = fastgen_keep_flags(chosen, &cum, 8, &cfg).iter().filter(|&&k| !k).count();
            assert_eq!(chosen_count, best.unwrap().0);
        }
    }

    #[test]
    fn reconstruction_of_full_keep_is_exact() {
        let mut rng = Rng::new(8);
        let attn = random_attention(&mut rng, 16, 16);
        assert!(reconstruction_error(&attn, &[true; 16]) < 1e-15);
    }

    #[test]
    fn per_layer_granularity_evicts_heads_together() {
        let mut rng = Rng::new(9);
        let mut cache = KvCache::new(1, 2, 2);
        for head in 0..2 {
            let k = Matrix::from_fn(32, 2, |_, _| rng.next_normal());
            cache.append(0, head, &k, &k, 32).unwrap();
        }
        let mut genome = Genome::zeros(ArchId::Bam);
        for p in genome.params.iter_mut() {
            *p = rng.next_normal() * 0.5;
        }
        let scorer = NammScorer::new(&MemoryModel::new(genome, NormScales::default()), 32, 16, 0.85)
            .unwrap()
            .with_granularity(Granularity::PerLayer);
        let chunks = vec![random_attention(&mut rng, 32, 32), random_attention(&mut rng, 32, 32)];
        let policy = EvictionPolicy::Namm(Arc::new(scorer));
        apply_update(&policy, &mut PolicyState::default(), &mut cache, &chunks, 32).unwrap();
        assert_eq!(cache.head(0, 0).positions(), cache.head(0, 1).positions());
    }
}
