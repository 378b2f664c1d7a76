//! CMA-ES over memory-model genomes, fitness normalized by the full-cache
//! model, and the incremental phase schedule with resumable checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::evd::{self_adjoint_evd, self_adjoint_evd_scratch, ComputeEigenvectors};
use faer::diag::Diag;
use faer::{Accum, Mat, MatMut, MatRef, Par};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{LeReader, LeWriter};
use crate::cache::CacheStats;
use crate::error::{NammError, Result};
use crate::eviction::{EvictionPolicy, Granularity, NammScorer};
use crate::lm::{continue_greedy, LmWeights, NoObserver, Session, UpdateEvent, UpdateObserver};
use crate::numerics::{clear_upper_simd_state, gemm, Matrix, Rng};
use crate::scorer::{param_count, ArchId, Genome, MemoryModel};
use crate::spectrogram::{calibrate_normalization, NormScales, N_BINS};
use crate::tasks::{make_eval_set, score_sample, PromptSample, Split, TaskConfig, TaskKind};

// ---------------------------------------------------------------------------
// CMA-ES.

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmaConfig {
    pub sigma0: f64,
    pub popsize: usize,
    pub elite_ratio: f64,
    /// Learning rate of the mean.
    pub mean_coeff: f64,
}

impl Default for CmaConfig {
    fn default() -> Self {
        Self {
            sigma0: 0.65,
            popsize: 32,
            elite_ratio: 0.5,
            mean_coeff: 1.0,
        }
    }
}

impl CmaConfig {
    pub fn elite_count(&self) -> usize {
        (self.popsize as f64 * self.elite_ratio).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0.is_finite() && self.sigma0 > 0.0) {
            return Err(NammError::Config(format!("sigma0 must be positive, got {}", self.sigma0)));
        }
        if self.popsize < 2 {
            return Err(NammError::Config(format!("popsize must be at least 2, got {}", self.popsize)));
        }
        let mu = self.elite_count();
        if mu == 0 || mu > self.popsize {
            return Err(NammError::Config(format!(
                "elite ratio {} leaves {mu} of {} candidates",
                self.elite_ratio, self.popsize
            )));
        }
        if !(self.mean_coeff > 0.0 && self.mean_coeff <= 1.0) {
            return Err(NammError::Config(format!("mean_coeff must be in (0, 1], got {}", self.mean_coeff)));
        }
        Ok(())
    }
}

/// Eigenvalues of the covariance are floored here before sampling.
pub const EIGEN_FLOOR: f64 = 1e-12;

const CMA_MAGIC: &[u8; 4] = b"CMAS";
const CMA_VERSION: u32 = 1;

/// Search distribution of a CMA-ES run. Constants not fixed by
/// [`CmaConfig`] use the standard recommended defaults.
#[derive(Clone, Debug)]
pub struct CmaState {
    config: CmaConfig,
    dim: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c1: f64,
    c_mu: f64,
    chi_n: f64,
    mean: Vec<f64>,
    /// Row-major `dim × dim`.
    cov: Vec<f64>,
    sigma: f64,
    p_sigma: Vec<f64>,
    p_c: Vec<f64>,
    generation: u64,
    /// Eigenvectors of `cov` as columns, row-major.
    basis: Vec<f64>,
    /// Square roots of the floored eigenvalues.
    axis: Vec<f64>,
    eigen_generation: u64,
    /// Steps `(x_k - mean) / sigma` of the last ask, awaiting a tell.
    pending: Vec<Vec<f64>>,
}

pub fn cma_init(dim: usize, config: &CmaConfig, mean0: Option<&[f64]>) -> Result<CmaState> {
    config.validate()?;
    if dim == 0 {
        return Err(NammError::invalid("CMA-ES needs at least one dimension"));
    }
    let mean = match mean0 {
        Some(m) if m.len() != dim => {
            return Err(NammError::shape(format!("initial mean has {} entries for dim {dim}", m.len())))
        }
        Some(m) => m.to_vec(),
        None => vec![0.0; dim],
    };
    let mut identity = vec![0.0; dim * dim];
    for i in 0..dim {
        identity[i * dim + i] = 1.0;
    }
    let mut state = CmaState {
        config: *config,
        dim,
        weights: Vec::new(),
        mu_eff: 0.0,
        c_sigma: 0.0,
        d_sigma: 0.0,
        c_c: 0.0,
        c1: 0.0,
        c_mu: 0.0,
        chi_n: 0.0,
        mean,
        cov: identity.clone(),
        sigma: config.sigma0,
        p_sigma: vec![0.0; dim],
        p_c: vec![0.0; dim],
        generation: 0,
        basis: identity,
        axis: vec![1.0; dim],
        eigen_generation: 0,
        pending: Vec::new(),
    };
    state.derive_constants();
    Ok(state)
}

impl CmaState {
    fn derive_constants(&mut self) {
        let n = self.dim as f64;
        let mu = self.config.elite_count();
        let raw: Vec<f64> = (1..=mu).map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln()).collect();
        let total: f64 = raw.iter().sum();
        self.weights = raw.iter().map(|w| w / total).collect();
        self.mu_eff = 1.0 / self.weights.iter().map(|w| w * w).sum::<f64>();
        let me = self.mu_eff;
        self.c_sigma = (me + 2.0) / (n + me + 5.0);
        self.d_sigma = 1.0 + 2.0 * (((me - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + self.c_sigma;
        self.c_c = (4.0 + me / n) / (n + 4.0 + 2.0 * me / n);
        self.c1 = 2.0 / ((n + 1.3).powi(2) + me);
        self.c_mu = (1.0 - self.c1).min(2.0 * (me - 2.0 + 1.0 / me) / ((n + 2.0).powi(2) + me));
        self.chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
    }

    pub fn config(&self) -> &CmaConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Recombination weights of the elites, best first.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn elite_count(&self) -> usize {
        self.weights.len()
    }

    pub fn covariance(&self) -> Matrix {
        Matrix::from_vec(self.dim, self.dim, self.cov.clone()).expect("square covariance")
    }

    /// Generations between eigendecompositions: the decomposition is
    /// refreshed once the covariance has absorbed about a tenth of a
    /// full update.
    fn eigen_interval(&self) -> u64 {
        let g = 1.0 / ((self.c1 + self.c_mu) * self.dim as f64 * 10.0);
        (g.floor() as u64).max(1)
    }

    fn update_eigen(&mut self) -> Result<()> {
        let n = self.dim;
        let mut u = Mat::<f64>::zeros(n, n);
        let mut s = Diag::<f64>::zeros(n);
        let par = Par::Seq;
        let mut mem = MemBuffer::new(self_adjoint_evd_scratch::<f64>(
            n,
            ComputeEigenvectors::Yes,
            par,
            Default::default(),
        ));
        let res = self_adjoint_evd(
            MatRef::from_row_major_slice(&self.cov, n, n),
            s.as_mut(),
            Some(u.as_mut()),
            par,
            MemStack::new(&mut mem),
            Default::default(),
        );
        clear_upper_simd_state();
        res.map_err(|e| NammError::Diverged(format!("covariance eigendecomposition failed: {e:?}")))?;
        let eig = s.column_vector();
        let mut floored = 0;
        for i in 0..n {
            let mut l = eig[i];
            if !(l >= EIGEN_FLOOR) {
                l = EIGEN_FLOOR;
                floored += 1;
            }
            self.axis[i] = l.sqrt();
            for r in 0..n {
                self.basis[r * n + i] = u[(r, i)];
            }
        }
        if floored > 0 {
            log::warn!("covariance had {floored} eigenvalues below {EIGEN_FLOOR:e}; floored and rebuilt");
            // C = B D² Bᵀ from the repaired spectrum.
            let scaled: Vec<f64> = (0..n * n).map(|k| self.basis[k] * self.axis[k % n].powi(2)).collect();
            gemm(
                MatMut::from_row_major_slice_mut(&mut self.cov, n, n),
                Accum::Replace,
                MatRef::from_row_major_slice(&scaled, n, n),
                MatRef::from_row_major_slice(&self.basis, n, n).transpose(),
                1.0,
            );
            self.symmetrize();
        }
        self.eigen_generation = self.generation;
        Ok(())
    }

    fn symmetrize(&mut self) {
        let n = self.dim;
        for i in 0..n {
            for j in 0..i {
                self.cov[j * n + i] = self.cov[i * n + j];
            }
        }
    }

    /// `C^{-1/2} v`.
    fn inv_sqrt_times(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut t = vec![0.0; n];
        for (r, &vr) in v.iter().enumerate() {
            let row = &self.basis[r * n..(r + 1) * n];
            for (tj, &b) in t.iter_mut().zip(row) {
                *tj += b * vr;
            }
        }
        for (tj, &a) in t.iter_mut().zip(&self.axis) {
            *tj /= a;
        }
        (0..n)
            .map(|r| self.basis[r * n..(r + 1) * n].iter().zip(&t).map(|(b, x)| b * x).sum())
            .collect()
    }

    /// Serializes the distribution after its last tell.
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut out = LeWriter::new(BufWriter::new(w));
        out.bytes(CMA_MAGIC)?;
        out.u32(CMA_VERSION)?;
        out.u64(self.dim as u64)?;
        out.u64(self.config.popsize as u64)?;
        out.f64(self.config.sigma0)?;
        out.f64(self.config.elite_ratio)?;
        out.f64(self.config.mean_coeff)?;
        out.u64(self.generation)?;
        out.u64(self.eigen_generation)?;
        out.f64(self.sigma)?;
        for v in [&self.mean, &self.p_sigma, &self.p_c, &self.axis, &self.cov, &self.basis] {
            out.f64s(v)?;
        }
        out.into_inner().flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut inp = LeReader::new(BufReader::new(r));
        inp.magic(CMA_MAGIC)?;
        inp.expect_u32("CMA state version", CMA_VERSION)?;
        let at = inp.offset();
        let dim = inp.u64()? as usize;
        if dim == 0 || dim > 1 << 16 {
            return Err(NammError::format(at, format!("implausible dimension {dim}")));
        }
        let config = CmaConfig {
            popsize: inp.u64()? as usize,
            sigma0: inp.f64()?,
            elite_ratio: inp.f64()?,
            mean_coeff: inp.f64()?,
        };
        config
            .validate()
            .map_err(|e| NammError::format(at, format!("stored CMA config: {e}")))?;
        let mut s = cma_init(dim, &config, None)?;
        s.generation = inp.u64()?;
        s.eigen_generation = inp.u64()?;
        s.sigma = inp.f64()?;
        s.mean = inp.f64s(dim)?;
        s.p_sigma = inp.f64s(dim)?;
        s.p_c = inp.f64s(dim)?;
        s.axis = inp.f64s(dim)?;
        s.cov = inp.f64s(dim * dim)?;
        s.basis = inp.f64s(dim * dim)?;
        if !inp.at_eof()? {
            return Err(NammError::format(inp.offset(), "trailing bytes after CMA state"));
        }
        Ok(s)
    }
}

/// Draws `popsize` candidates `mean + sigma · B D z`.
pub fn cma_ask(state: &mut CmaState, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    if state.generation >= state.eigen_generation + state.eigen_interval() {
        state.update_eigen()?;
    }
    let (n, lam) = (state.dim, state.config.popsize);
    let mut zd = vec![0.0; lam * n];
    for row in zd.chunks_exact_mut(n) {
        for (z, &a) in row.iter_mut().zip(&state.axis) {
            *z = rng.next_normal() * a;
        }
    }
    let mut y = vec![0.0; lam * n];
    gemm(
        MatMut::from_row_major_slice_mut(&mut y, lam, n),
        Accum::Replace,
        MatRef::from_row_major_slice(&zd, lam, n),
        MatRef::from_row_major_slice(&state.basis, n, n).transpose(),
        1.0,
    );
    state.pending = y.chunks_exact(n).map(|r| r.to_vec()).collect();
    Ok(state
        .pending
        .iter()
        .map(|yk| state.mean.iter().zip(yk).map(|(m, v)| m + state.sigma * v).collect())
        .collect())
}

/// Candidate indices from best to worst. NaN ranks last; ties keep
/// sampling order.
pub fn rank_order(fitness: &[f64]) -> Vec<usize> {
    rank_order_by(fitness, None)
}

/// [`rank_order`], with exact fitness ties going to the smaller `tie` value.
pub fn rank_order_by(fitness: &[f64], tie: Option<&[f64]>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..fitness.len()).collect();
    idx.sort_by(|&a, &b| {
        let (fa, fb) = (fitness[a], fitness[b]);
        match (fa.is_nan(), fb.is_nan()) {
            (true, true) => std::cmp::Ordering::Equal,
            (true, false) => std::cmp::Ordering::Greater,
            (false, true) => std::cmp::Ordering::Less,
            _ => fb.partial_cmp(&fa).expect("non-NaN").then_with(|| match tie {
                Some(t) => t[a].total_cmp(&t[b]),
                None => std::cmp::Ordering::Equal,
            }),
        }
    });
    idx
}

/// Updates the distribution from one fitness per candidate of the last
/// ask, higher being better.
pub fn cma_tell(state: &mut CmaState, fitness: &[f64]) -> Result<()> {
    if fitness.len() != state.config.popsize {
        return Err(NammError::shape(format!("{} fitness values for {} candidates", fitness.len(), state.config.popsize)));
    }
    cma_tell_ranked(state, &rank_order(fitness))
}

/// Updates the distribution from candidate indices ordered best first.
pub fn cma_tell_ranked(state: &mut CmaState, order: &[usize]) -> Result<()> {
    let (n, lam) = (state.dim, state.config.popsize);
    if state.pending.len() != lam {
        return Err(NammError::invalid("cma_tell without a preceding cma_ask"));
    }
    let mut seen = vec![false; lam];
    if order.len() != lam || order.iter().any(|&k| k >= lam || std::mem::replace(&mut seen[k], true)) {
        return Err(NammError::shape(format!("ranking is not a permutation of {lam} candidates")));
    }
    let mu = state.weights.len();
    let elites: Vec<&[f64]> = order[..mu].iter().map(|&k| state.pending[k].as_slice()).collect();

    let mut y_w = vec![0.0; n];
    for (w, y) in state.weights.iter().zip(&elites) {
        for (a, &v) in y_w.iter_mut().zip(*y) {
            *a += w * v;
        }
    }
    let step = state.config.mean_coeff * state.sigma;
    for (m, &v) in state.mean.iter_mut().zip(&y_w) {
        *m += step * v;
    }

    let (cs, cc, c1, cmu, me) = (state.c_sigma, state.c_c, state.c1, state.c_mu, state.mu_eff);
    let z_w = state.inv_sqrt_times(&y_w);
    let ks = (cs * (2.0 - cs) * me).sqrt();
    for (p, &z) in state.p_sigma.iter_mut().zip(&z_w) {
        *p = (1.0 - cs) * *p + ks * z;
    }
    let norm_ps = state.p_sigma.iter().map(|v| v * v).sum::<f64>().sqrt();
    let g1 = (state.generation + 1) as f64;
    let h_sigma = norm_ps / (1.0 - (1.0 - cs).powf(2.0 * g1)).sqrt() < (1.4 + 2.0 / (n as f64 + 1.0)) * state.chi_n;
    let kc = if h_sigma { (cc * (2.0 - cc) * me).sqrt() } else { 0.0 };
    for (p, &v) in state.p_c.iter_mut().zip(&y_w) {
        *p = (1.0 - cc) * *p + kc * v;
    }

    let delta = if h_sigma { 0.0 } else { cc * (2.0 - cc) };
    let decay = 1.0 - c1 - cmu + c1 * delta;
    for i in 0..n {
        let pi = state.p_c[i];
        let row = &mut state.cov[i * n..(i + 1) * n];
        for (c, &pj) in row.iter_mut().zip(&state.p_c) {
            *c = decay * *c + c1 * pi * pj;
        }
    }
    let mut ys = vec![0.0; mu * n];
    let mut wys = vec![0.0; mu * n];
    for (r, (w, y)) in state.weights.iter().zip(&elites).enumerate() {
        ys[r * n..(r + 1) * n].copy_from_slice(y);
        for (o, &v) in wys[r * n..(r + 1) * n].iter_mut().zip(*y) {
            *o = w * v;
        }
    }
    gemm(
        MatMut::from_row_major_slice_mut(&mut state.cov, n, n),
        Accum::Add,
        MatRef::from_row_major_slice(&ys, mu, n).transpose(),
        MatRef::from_row_major_slice(&wys, mu, n),
        cmu,
    );
    state.symmetrize();

    state.sigma *= ((cs / state.d_sigma) * (norm_ps / state.chi_n - 1.0)).exp();
    if !(state.sigma.is_finite() && state.sigma > 0.0) {
        return Err(NammError::Diverged(format!("step size became {}", state.sigma)));
    }
    state.generation += 1;
    state.pending.clear();
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation.

/// Everything besides the genome that a learned policy needs.
#[derive(Clone, Debug, PartialEq)]
pub struct NammSetup {
    pub scales: NormScales,
    pub threshold_offset: f64,
    pub granularity: Granularity,
    pub n_w: usize,
    pub s_w: usize,
    pub gamma: f64,
}

impl NammSetup {
    pub fn memory_model(&self, genome: Genome) -> MemoryModel {
        let mut m = MemoryModel::new(genome, self.scales);
        m.threshold_offset = self.threshold_offset;
        m
    }

    pub fn policy(&self, genome: &Genome) -> Result<EvictionPolicy> {
        self.policy_for(&self.memory_model(genome.clone()))
    }

    /// Policy for a stored model; its own scales and offset win.
    pub fn policy_for(&self, model: &MemoryModel) -> Result<EvictionPolicy> {
        let scorer = NammScorer::new(model, self.n_w, self.s_w, self.gamma)?.with_granularity(self.granularity);
        Ok(EvictionPolicy::Namm(Arc::new(scorer)))
    }
}

/// Raw EMA reductions of every cached token at every update while a
/// retain-everything policy reads `samples`; scales give each bin unit
/// variance over that population.
pub fn calibrate_scales(lm: &LmWeights, samples: &[PromptSample], n_up: usize, setup: &NammSetup) -> Result<NormScales> {
    struct Collect(Vec<[f64; N_BINS]>);
    impl UpdateObserver for Collect {
        fn on_update(&mut self, e: &UpdateEvent<'_>) -> Result<()> {
            let c = e.cache;
            for l in 0..c.n_layers() {
                for h in 0..c.n_heads() {
                    for m in c.head(l, h).meta() {
                        if m.ema.chunk_count > 0 {
                            self.0.push(m.ema.reduced);
                        }
                    }
                }
            }
            Ok(())
        }

        fn wants_positions(&self) -> bool {
            false
        }
    }
    let neutral = NammSetup {
        scales: NormScales::default(),
        threshold_offset: 0.0,
        granularity: Granularity::PerHead,
        ..setup.clone()
    };
    let policy = neutral.policy(&Genome::zeros(ArchId::Mlp))?;
    let mut collect = Collect(Vec::new());
    for s in samples {
        Session::new(lm, policy.clone(), n_up)?.feed(s.prompt(), &mut collect)?;
    }
    if collect.0.len() < 2 {
        return Err(NammError::invalid(format!(
            "calibration saw {} token states; prompts must span at least one update of {n_up} tokens",
            collect.0.len()
        )));
    }
    calibrate_normalization(&collect.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptRun {
    pub output: Vec<u32>,
    pub score: f64,
    pub prompt_len: usize,
    /// Mean retained tokens per head once the prompt has been read.
    pub cache_size: f64,
    /// Per-head sizes and oldness at the same point.
    pub stats: CacheStats,
}

/// Reads the prompt, records the cache, then decodes the answer greedily.
pub fn run_prompt(lm: &LmWeights, policy: &EvictionPolicy, sample: &PromptSample, n_up: usize) -> Result<PromptRun> {
    let mut session = Session::new(lm, policy.clone(), n_up)?;
    session.feed(sample.prompt(), &mut NoObserver)?;
    let cache_size = session.cache().mean_len();
    let stats = session.cache().stats(session.step());
    let output = continue_greedy(&mut session, sample.answer().len(), &mut NoObserver)?;
    Ok(PromptRun {
        score: score_sample(&output, sample),
        output,
        prompt_len: sample.prompt().len(),
        cache_size,
        stats,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub n: usize,
    pub mean_score: f64,
    pub mean_cache_size: f64,
    pub mean_cache_fraction: f64,
}

pub fn summarize(runs: &[PromptRun]) -> BatchSummary {
    let n = runs.len();
    if n == 0 {
        return BatchSummary::default();
    }
    let k = n as f64;
    BatchSummary {
        n,
        mean_score: runs.iter().map(|r| r.score).sum::<f64>() / k,
        mean_cache_size: runs.iter().map(|r| r.cache_size).sum::<f64>() / k,
        mean_cache_fraction: runs.iter().map(|r| r.cache_size / r.prompt_len as f64).sum::<f64>() / k,
    }
}

pub fn evaluate_policy(lm: &LmWeights, policy: &EvictionPolicy, samples: &[PromptSample], n_up: usize) -> Result<BatchSummary> {
    let runs = samples
        .iter()
        .map(|s| run_prompt(lm, policy, s, n_up))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&runs))
}

/// Substituted for a base score below it.
pub const BASE_SCORE_FLOOR: f64 = 1e-6;

/// `raw / base`, with the base floored; the flag reports the floor.
pub fn normalized_score(raw: f64, base: f64) -> (f64, bool) {
    if base < BASE_SCORE_FLOOR {
        (raw / BASE_SCORE_FLOOR, true)
    } else {
        (raw / base, false)
    }
}

/// A task's prompts with the full-cache mean score on them.
#[derive(Clone, Debug)]
pub struct TaskBatch {
    pub kind: TaskKind,
    pub samples: Vec<PromptSample>,
    pub base: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFitness {
    pub kind: TaskKind,
    pub raw: f64,
    pub base: f64,
    pub ratio: f64,
    pub floored: bool,
    pub cache_size: f64,
    pub cache_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    /// Mean over tasks of the normalized score.
    pub fitness: f64,
    pub tasks: Vec<TaskFitness>,
}

impl CandidateResult {
    pub fn from_summaries(batches: &[TaskBatch], summaries: &[BatchSummary]) -> Self {
        let tasks: Vec<TaskFitness> = batches
            .iter()
            .zip(summaries)
            .map(|(b, s)| {
                let (ratio, floored) = normalized_score(s.mean_score, b.base);
                if floored {
                    log::warn!("{} base score {} floored to {BASE_SCORE_FLOOR:e}", b.kind.id(), b.base);
                }
                TaskFitness {
                    kind: b.kind,
                    raw: s.mean_score,
                    base: b.base,
                    ratio,
                    floored,
                    cache_size: s.mean_cache_size,
                    cache_fraction: s.mean_cache_fraction,
                }
            })
            .collect();
        let fitness = tasks.iter().map(|t| t.ratio).sum::<f64>() / tasks.len().max(1) as f64;
        Self { fitness, tasks }
    }

    pub fn mean_cache_size(&self) -> f64 {
        self.tasks.iter().map(|t| t.cache_size).sum::<f64>() / self.tasks.len().max(1) as f64
    }

    pub fn mean_cache_fraction(&self) -> f64 {
        self.tasks.iter().map(|t| t.cache_fraction).sum::<f64>() / self.tasks.len().max(1) as f64
    }
}

pub fn evaluate_candidate(
    lm: &LmWeights,
    policy: &EvictionPolicy,
    batches: &[TaskBatch],
    n_up: usize,
) -> Result<CandidateResult> {
    let summaries = batches
        .iter()
        .map(|b| evaluate_policy(lm, policy, &b.samples, n_up))
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidateResult::from_summaries(batches, &summaries))
}

/// [`evaluate_candidate`] with prompts spread over `pool`.
pub fn evaluate_candidate_parallel(
    lm: &LmWeights,
    policy: &EvictionPolicy,
    batches: &[TaskBatch],
    n_up: usize,
    pool: &rayon::ThreadPool,
) -> Result<CandidateResult> {
    let jobs: Vec<(usize, &PromptSample)> = batches
        .iter()
        .enumerate()
        .flat_map(|(t, b)| b.samples.iter().map(move |s| (t, s)))
        .collect();
    let runs = pool.install(|| {
        jobs.par_iter()
            .map(|(_, s)| run_prompt(lm, policy, s, n_up))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut per_task = vec![Vec::new(); batches.len()];
    for ((t, _), r) in jobs.iter().zip(runs) {
        per_task[*t].push(r);
    }
    let summaries: Vec<BatchSummary> = per_task.iter().map(|r| summarize(r)).collect();
    Ok(CandidateResult::from_summaries(batches, &summaries))
}

// ---------------------------------------------------------------------------
// Base-score cache.

#[derive(Debug, Serialize, Deserialize)]
struct BaseScoreFile {
    lm_fingerprint: String,
    scores: BTreeMap<String, f64>,
}

/// Full-cache batch scores persisted by `(task, batch seed, size, split)`
/// for one language model.
#[derive(Debug)]
pub struct BaseScoreCache {
    path: Option<PathBuf>,
    file: BaseScoreFile,
}

impl BaseScoreCache {
    pub fn in_memory(lm_fingerprint: &str) -> Self {
        Self {
            path: None,
            file: BaseScoreFile {
                lm_fingerprint: lm_fingerprint.to_string(),
                scores: BTreeMap::new(),
            },
        }
    }

    /// Opens `path`, starting empty if it is missing or belongs to a
    /// different model.
    pub fn open(path: &Path, lm_fingerprint: &str) -> Result<Self> {
        let mut cache = Self::in_memory(lm_fingerprint);
        cache.path = Some(path.to_path_buf());
        if path.exists() {
            let file: BaseScoreFile = serde_json::from_slice(&fs::read(path)?)?;
            if file.lm_fingerprint == lm_fingerprint {
                cache.file = file;
            } else {
                log::warn!("{} was computed for another model; recomputing", path.display());
            }
        }
        Ok(cache)
    }

    pub fn key(kind: TaskKind, seed: u64, n: usize, split: Split) -> String {
        format!("{}/{seed:016x}/{n}/{split:?}", kind.id())
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.file.scores.get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.file.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.file.scores.is_empty()
    }

    pub fn get_or_compute(&mut self, key: &str, compute: impl FnOnce() -> Result<f64>) -> Result<f64> {
        if let Some(v) = self.get(key) {
            return Ok(v);
        }
        let v = compute()?;
        self.file.scores.insert(key.to_string(), v);
        if let Some(path) = &self.path {
            write_atomic(path, &serde_json::to_vec_pretty(&self.file)?)?;
        }
        Ok(v)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Phase schedule.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub tasks: Vec<TaskKind>,
    pub generations: usize,
}

/// The `evolution` section of a run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionConfig {
    pub arch: ArchId,
    pub sigma0: f64,
    pub popsize: usize,
    pub elite_ratio: f64,
    pub mean_coeff: f64,
    /// Prompts per task shared by a generation's candidates.
    pub batch_size: usize,
    /// Prompts per task on which the mean genome is scored each generation.
    pub eval_size: usize,
    pub calibration_prompts: usize,
    /// Break exact fitness ties in the CMA ranking by smaller mean cache
    /// fraction.
    pub prefer_smaller_cache: bool,
    pub phases: Vec<PhaseSpec>,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        let cma = CmaConfig::default();
        use TaskKind::*;
        Self {
            arch: ArchId::Bam,
            sigma0: cma.sigma0,
            popsize: cma.popsize,
            elite_ratio: cma.elite_ratio,
            mean_coeff: cma.mean_coeff,
            batch_size: 64,
            eval_size: 64,
            calibration_prompts: 16,
            prefer_smaller_cache: false,
            phases: vec![
                PhaseSpec {
                    tasks: vec![Passkey],
                    generations: 100,
                },
                PhaseSpec {
                    tasks: vec![Passkey, DedupQa],
                    generations: 80,
                },
                PhaseSpec {
                    tasks: vec![Passkey, DedupQa, CopyDistractor],
                    generations: 50,
                },
            ],
        }
    }
}

impl EvolutionConfig {
    pub fn cma(&self) -> CmaConfig {
        CmaConfig {
            sigma0: self.sigma0,
            popsize: self.popsize,
            elite_ratio: self.elite_ratio,
            mean_coeff: self.mean_coeff,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cma().validate()?;
        if self.batch_size == 0 || self.eval_size == 0 || self.calibration_prompts == 0 {
            return Err(NammError::Config(
                "batch_size, eval_size and calibration_prompts must be positive".into(),
            ));
        }
        if self.phases.is_empty() {
            return Err(NammError::Config("the schedule needs at least one phase".into()));
        }
        let mut prev: &[TaskKind] = &[];
        for (i, p) in self.phases.iter().enumerate() {
            if p.tasks.is_empty() {
                return Err(NammError::Config(format!("phase {i} has no tasks")));
            }
            for (j, t) in p.tasks.iter().enumerate() {
                if p.tasks[..j].contains(t) {
                    return Err(NammError::Config(format!("phase {i} lists {} twice", t.id())));
                }
            }
            if let Some(missing) = prev.iter().find(|t| !p.tasks.contains(t)) {
                return Err(NammError::Config(format!(
                    "phase {i} drops {} from the previous phase; task sets must grow",
                    missing.id()
                )));
            }
            prev = &p.tasks;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub phase: usize,
    pub generation: usize,
    pub best_score: f64,
    pub best_cache_fraction: f64,
    /// Generation whose mean genome is the best; 0 is the phase start.
    pub best_generation: usize,
    pub rng_seed: u64,
    pub arch: ArchId,
    pub tasks: Vec<TaskKind>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub genome: Genome,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Progress {
    generation: usize,
    rng: Rng,
    best_score: f64,
    best_cache_fraction: f64,
    best_generation: usize,
    best_params: Vec<f64>,
}

/// One curves row: population statistics and the mean genome on the
/// per-task evaluation sets.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub generation: usize,
    pub pop_mean: f64,
    pub pop_std: f64,
    pub mean_genome: CandidateResult,
    pub sigma: f64,
    pub best_score: f64,
}

pub fn curves_header(tasks: &[TaskKind]) -> Vec<String> {
    let mut h = vec!["generation".to_string(), "pop_mean".into(), "pop_std".into()];
    for t in tasks {
        h.push(format!("{}_score", t.id()));
        h.push(format!("{}_norm", t.id()));
    }
    h.extend(
        ["mean_norm", "mean_cache_size", "mean_cache_fraction", "sigma", "best_norm"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

impl CurveRow {
    fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.generation.to_string(),
            self.pop_mean.to_string(),
            self.pop_std.to_string(),
        ];
        for t in &self.mean_genome.tasks {
            r.push(t.raw.to_string());
            r.push(t.ratio.to_string());
        }
        r.push(self.mean_genome.fitness.to_string());
        r.push(self.mean_genome.mean_cache_size().to_string());
        r.push(self.mean_genome.mean_cache_fraction().to_string());
        r.push(self.sigma.to_string());
        r.push(self.best_score.to_string());
        r
    }
}

/// Folds `parts` into one seed; distinct paths give unrelated streams.
pub fn seed_from(parts: &[u64]) -> u64 {
    let mut s = 0x6E61_6D6D_6B69_7400u64;
    for &p in parts {
        s = Rng::new(s ^ p).next_u64();
    }
    s
}

fn kind_index(kind: TaskKind) -> u64 {
    match kind {
        TaskKind::Passkey => 0,
        TaskKind::DedupQa => 1,
        TaskKind::CopyDistractor => 2,
    }
}

/// An evolution run over a frozen model.
pub struct Evolution<'a> {
    pub lm: &'a LmWeights,
    pub config: EvolutionConfig,
    /// Generator settings per task kind.
    pub tasks: Vec<TaskConfig>,
    pub setup: NammSetup,
    pub n_up: usize,
    pub seed: u64,
    pub workers: usize,
    pub out_dir: PathBuf,
}

impl<'a> Evolution<'a> {
    fn task_config(&self, kind: TaskKind) -> Result<&TaskConfig> {
        self.tasks
            .iter()
            .find(|t| t.kind == kind)
            .ok_or_else(|| NammError::Config(format!("no task settings for {}", kind.id())))
    }

    pub fn batch_seed(&self, kind: TaskKind, phase: usize, generation: usize) -> u64 {
        seed_from(&[self.seed, 1, kind_index(kind), phase as u64, generation as u64])
    }

    pub fn validation_seed(&self, kind: TaskKind) -> u64 {
        seed_from(&[self.seed, 2, kind_index(kind)])
    }

    pub fn calibration_seed(&self) -> u64 {
        seed_from(&[self.seed, 3])
    }

    fn task_batch(&self, kind: TaskKind, seed: u64, n: usize, base: &mut BaseScoreCache) -> Result<TaskBatch> {
        let samples = make_eval_set(self.task_config(kind)?, n, seed, Split::Train)?;
        let key = BaseScoreCache::key(kind, seed, n, Split::Train);
        let score = base.get_or_compute(&key, || {
            Ok(evaluate_policy(self.lm, &EvictionPolicy::Full, &samples, self.n_up)?.mean_score)
        })?;
        Ok(TaskBatch {
            kind,
            samples,
            base: score,
        })
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers.max(1))
            .build()
            .map_err(|e| NammError::Config(format!("worker pool: {e}")))
    }

    pub fn phase_dir(&self, phase: usize) -> PathBuf {
        self.out_dir.join(format!("phase_{phase}"))
    }

    /// Feature scales, calibrated once per run directory.
    pub fn scales(&self) -> Result<NormScales> {
        let path = self.out_dir.join("scales.json");
        if path.exists() {
            return Ok(serde_json::from_slice(&fs::read(&path)?)?);
        }
        let kind = self.config.phases[0].tasks[0];
        let samples = make_eval_set(
            self.task_config(kind)?,
            self.config.calibration_prompts,
            self.calibration_seed(),
            Split::Train,
        )?;
        let scales = calibrate_scales(self.lm, &samples, self.n_up, &self.setup)?;
        fs::create_dir_all(&self.out_dir)?;
        write_atomic(&path, &serde_json::to_vec_pretty(&scales)?)?;
        Ok(scales)
    }

    /// Runs every phase, resuming where the run directory left off.
    pub fn run(&mut self) -> Result<Checkpoint> {
        self.config.validate()?;
        fs::create_dir_all(&self.out_dir)?;
        self.setup.scales = self.scales()?;
        let mut ckpt = Checkpoint {
            manifest: CheckpointManifest {
                phase: 0,
                generation: 0,
                best_score: f64::NAN,
                best_cache_fraction: f64::NAN,
                best_generation: 0,
                rng_seed: self.seed,
                arch: self.config.arch,
                tasks: Vec::new(),
            },
            genome: Genome::zeros(self.config.arch),
        };
        for phase in 0..self.config.phases.len() {
            ckpt = self.run_phase(phase, &ckpt)?;
        }
        self.export(&self.out_dir, &ckpt)?;
        Ok(ckpt)
    }

    fn export(&self, dir: &Path, ckpt: &Checkpoint) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.setup.memory_model(ckpt.genome.clone()).save(&dir.join("best.namm"))?;
        write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&ckpt.manifest)?)
    }

    /// Asks, evaluates and tells for the phase's generation budget,
    /// starting from `start`'s genome as the mean. The returned checkpoint
    /// holds the mean genome with the best normalized score on the
    /// evaluation sets; ties go to the smaller cache.
    pub fn run_phase(&self, phase: usize, start: &Checkpoint) -> Result<Checkpoint> {
        let spec = &self.config.phases[phase];
        if spec.generations == 0 {
            return Ok(start.clone());
        }
        let arch = self.config.arch;
        if start.genome.arch != arch || start.genome.params.len() != param_count(arch) {
            return Err(NammError::Config(format!("phase {phase} start genome is not a {arch:?} genome")));
        }
        let dir = self.phase_dir(phase);
        fs::create_dir_all(&dir)?;
        let pool = self.pool()?;
        let mut base = BaseScoreCache::open(&self.out_dir.join("base_scores.json"), &self.lm.fingerprint())?;
        let val: Vec<TaskBatch> = spec
            .tasks
            .iter()
            .map(|&k| self.task_batch(k, self.validation_seed(k), self.config.eval_size, &mut base))
            .collect::<Result<_>>()?;

        let state_path = dir.join("state.bin");
        let curves_path = dir.join("curves.csv");
        let (mut cma, mut progress) = if state_path.exists() {
            let (cma, progress) = read_state(&state_path)?;
            if cma.dim() != param_count(arch) {
                return Err(NammError::Config(format!("{} does not match arch {arch:?}", state_path.display())));
            }
            truncate_curves(&curves_path, progress.generation)?;
            log::info!("phase {phase}: resuming after generation {}", progress.generation);
            (cma, progress)
        } else {
            let cma = cma_init(param_count(arch), &self.config.cma(), Some(&start.genome.params))?;
            let first = evaluate_candidate_parallel(self.lm, &self.setup.policy(&start.genome)?, &val, self.n_up, &pool)?;
            let progress = Progress {
                generation: 0,
                rng: Rng::new(seed_from(&[self.seed, 4, phase as u64])),
                best_score: first.fitness,
                best_cache_fraction: first.mean_cache_fraction(),
                best_generation: 0,
                best_params: start.genome.params.clone(),
            };
            write_curves_header(&curves_path, &spec.tasks)?;
            (cma, progress)
        };

        for g in progress.generation..spec.generations {
            let batches: Vec<TaskBatch> = spec
                .tasks
                .iter()
                .map(|&k| self.task_batch(k, self.batch_seed(k, phase, g), self.config.batch_size, &mut base))
                .collect::<Result<_>>()?;
            let candidates = cma_ask(&mut cma, &mut progress.rng)?;
            let results: Vec<CandidateResult> = pool.install(|| {
                candidates
                    .par_iter()
                    .map(|x| {
                        let policy = self.setup.policy(&Genome::new(arch, x.clone())?)?;
                        evaluate_candidate(self.lm, &policy, &batches, self.n_up)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let fitness: Vec<f64> = results.iter().map(|r| r.fitness).collect();
            let fractions: Vec<f64> = results.iter().map(|r| r.mean_cache_fraction()).collect();
            let tie = self.config.prefer_smaller_cache.then_some(fractions.as_slice());
            cma_tell_ranked(&mut cma, &rank_order_by(&fitness, tie))?;

            let mean = Genome::new(arch, cma.mean().to_vec())?;
            let res = evaluate_candidate_parallel(self.lm, &self.setup.policy(&mean)?, &val, self.n_up, &pool)?;
            let better = res.fitness > progress.best_score
                || (res.fitness == progress.best_score && res.mean_cache_fraction() < progress.best_cache_fraction);
            if better {
                progress.best_score = res.fitness;
                progress.best_cache_fraction = res.mean_cache_fraction();
                progress.best_generation = g + 1;
                progress.best_params = mean.params.clone();
            }
            let (pop_mean, pop_std) = mean_std(&fitness);
            let row = CurveRow {
                generation: g + 1,
                pop_mean,
                pop_std,
                sigma: cma.sigma(),
                best_score: progress.best_score,
                mean_genome: res,
            };
            log::info!(
                "phase {phase} gen {}: pop {:.4}±{:.4} mean {:.4} cache {:.3} best {:.4}",
                g + 1,
                pop_mean,
                pop_std,
                row.mean_genome.fitness,
                row.mean_genome.mean_cache_fraction(),
                progress.best_score
            );
            append_curve(&curves_path, &row)?;
            progress.generation = g + 1;
            write_state(&state_path, &cma, &progress)?;
        }

        let ckpt = Checkpoint {
            manifest: CheckpointManifest {
                phase,
                generation: progress.generation,
                best_score: progress.best_score,
                best_cache_fraction: progress.best_cache_fraction,
                best_generation: progress.best_generation,
                rng_seed: self.seed,
                arch,
                tasks: spec.tasks.clone(),
            },
            genome: Genome::new(arch, progress.best_params)?,
        };
        self.export(&dir, &ckpt)?;
        Ok(ckpt)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let finite: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if finite.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = finite.len() as f64;
    let m = finite.iter().sum::<f64>() / n;
    let var = finite.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn write_state(path: &Path, cma: &CmaState, progress: &Progress) -> Result<()> {
    let mut buf = Vec::new();
    cma.write_to(&mut buf)?;
    let json = serde_json::to_vec(progress)?;
    let mut out = LeWriter::new(Vec::with_capacity(buf.len() + json.len() + 8));
    out.u64(buf.len() as u64)?;
    out.bytes(&buf)?;
    out.bytes(&json)?;
    write_atomic(path, &out.into_inner())
}

fn read_state(path: &Path) -> Result<(CmaState, Progress)> {
    let bytes = fs::read(path)?;
    let mut inp = LeReader::new(bytes.as_slice());
    let n = inp.u64()? as usize;
    if n > bytes.len() - 8 {
        return Err(NammError::format(0, format!("state claims {n} CMA bytes, file has {}", bytes.len())));
    }
    let cma = CmaState::read_from(&bytes[8..8 + n])?;
    let progress = serde_json::from_slice(&bytes[8 + n..])?;
    Ok((cma, progress))
}

fn write_curves_header(path: &Path, tasks: &[TaskKind]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(curves_header(tasks)).map_err(csv_err)?;
    w.flush()?;
    Ok(())
}

fn append_curve(path: &Path, row: &CurveRow) -> Result<()> {
    let file = fs::OpenOptions::new().append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(row.record()).map_err(csv_err)?;
    w.flush()?;
    Ok(())
}

/// Drops curve rows past `generations`, left by an interrupted run.
fn truncate_curves(path: &Path, generations: usize) -> Result<()> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    let rows: Vec<csv::StringRecord> = r
        .records()
        .take(generations)
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(&header).map_err(csv_err)?;
    for row in &rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> NammError {
    NammError::Io(std::io::Error::other(e))
}
