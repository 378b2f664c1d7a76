//! Synthetic long-context tasks over a 64-token vocabulary.
//!
//! Ids 0..8 are markers and 8..64 filler. Every prompt ends with a query
//! marker and the answer follows it directly, so a sample is one sequence
//! with an answer span at its tail.

use serde::{Deserialize, Serialize};

use crate::error::{NammError, Result};
use crate::lm::TrainExample;
use crate::numerics::Rng;

pub const PAD: u32 = 0;
pub const KEY: u32 = 1;
pub const QUERY: u32 = 2;
pub const FACT: u32 = 3;
pub const ASK: u32 = 4;
pub const COPY_OPEN: u32 = 5;
pub const COPY_CLOSE: u32 = 6;
pub const COPY_QUERY: u32 = 7;
pub const FIRST_FILLER: u32 = 8;
pub const VOCAB: u32 = 64;
/// Copy spans use ids `COPY_SPLIT..VOCAB`, copy distractors `FIRST_FILLER..COPY_SPLIT`.
pub const COPY_SPLIT: u32 = 36;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Passkey,
    DedupQa,
    CopyDistractor,
}

impl TaskKind {
    pub fn id(self) -> &'static str {
        match self {
            TaskKind::Passkey => "passkey",
            TaskKind::DedupQa => "dedup_qa",
            TaskKind::CopyDistractor => "copy_distractor",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "passkey" => Ok(TaskKind::Passkey),
            "dedup_qa" => Ok(TaskKind::DedupQa),
            "copy_distractor" => Ok(TaskKind::CopyDistractor),
            other => Err(NammError::invalid(format!("unknown task '{other}'"))),
        }
    }

    pub fn metric(self) -> Metric {
        match self {
            TaskKind::Passkey | TaskKind::DedupQa => Metric::ExactMatch,
            TaskKind::CopyDistractor => Metric::TokenAccuracy,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ExactMatch,
    TokenAccuracy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Prompt length, markers included.
    pub length: usize,
    pub key_length: usize,
    #[serde(default = "default_duplicates")]
    pub n_duplicates: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_duplicates() -> usize {
    3
}

impl TaskConfig {
    pub fn new(kind: TaskKind, length: usize, key_length: usize) -> Self {
        Self {
            kind,
            length,
            key_length,
            n_duplicates: default_duplicates(),
            seed: 0,
        }
    }

    /// Shortest prompt the layout allows.
    pub fn min_length(&self) -> usize {
        let k = self.key_length;
        match self.kind {
            TaskKind::Passkey => k + 2,
            TaskKind::DedupQa => self.n_duplicates * (k + 1) + 1,
            TaskKind::CopyDistractor => k + 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.key_length == 0 {
            return Err(NammError::Config("task key_length must be positive".into()));
        }
        if self.kind == TaskKind::DedupQa && self.n_duplicates < 2 {
            return Err(NammError::Config(format!(
                "dedup_qa needs n_duplicates >= 2, got {}",
                self.n_duplicates
            )));
        }
        if self.length < self.min_length() {
            return Err(NammError::Config(format!(
                "{} prompt length {} is below the minimum {}",
                self.kind.id(),
                self.length,
                self.min_length()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSample {
    /// Prompt followed by the answer.
    pub tokens: Vec<u32>,
    pub answer_span: (usize, usize),
    pub task: TaskKind,
    pub metric: Metric,
    pub seed: u64,
}

impl PromptSample {
    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..self.answer_span.0]
    }

    pub fn answer(&self) -> &[u32] {
        &self.tokens[self.answer_span.0..self.answer_span.1]
    }

    /// Teacher-forced example with the loss on the answer tokens.
    pub fn train_example(&self) -> TrainExample {
        let (s, e) = self.answer_span;
        TrainExample {
            tokens: self.tokens.clone(),
            loss_mask: (0..self.tokens.len()).map(|t| t >= s && t < e).collect(),
        }
    }
}

fn filler(rng: &mut Rng, lo: u32, hi: u32) -> u32 {
    lo + rng.below((hi - lo) as u64) as u32
}

fn occurrences(haystack: &[u32], needle: &[u32]) -> Vec<usize> {
    if needle.is_empty() || haystack.len() < needle.len() {
        return Vec::new();
    }
    (0..=haystack.len() - needle.len())
        .filter(|&i| haystack[i..i + needle.len()] == *needle)
        .collect()
}

/// Redraws filler so `needle` occurs only at `keep`. `fixed[i]` marks
/// positions that must not change.
fn scrub(tokens: &mut [u32], fixed: &[bool], needle: &[u32], keep: &[usize], rng: &mut Rng, lo: u32, hi: u32) {
    loop {
        let stray: Vec<usize> = occurrences(tokens, needle)
            .into_iter()
            .filter(|i| !keep.contains(i))
            .collect();
        if stray.is_empty() {
            return;
        }
        for i in stray {
            // A stray match cannot be made entirely of fixed tokens, since
            // fixed blocks are exactly the kept occurrences.
            if let Some(p) = (i..i + needle.len()).find(|&p| !fixed[p]) {
                tokens[p] = filler(rng, lo, hi);
            }
        }
    }
}

/// Filler with `[KEY, k_1..k_K]` at a uniform offset and a trailing QUERY;
/// the answer is the key.
pub fn gen_passkey(cfg: &TaskConfig, rng: &mut Rng) -> Result<PromptSample> {
    cfg.validate()?;
    let (l, k) = (cfg.length, cfg.key_length);
    let key: Vec<u32> = (0..k).map(|_| filler(rng, FIRST_FILLER, VOCAB)).collect();
    let offset = rng.below((l - k - 1) as u64) as usize;
    let mut tokens: Vec<u32> = (0..l - 1).map(|_| filler(rng, FIRST_FILLER, VOCAB)).collect();
    let mut fixed = vec![false; l - 1];
    tokens[offset] = KEY;
    tokens[offset + 1..offset + 1 + k].copy_from_slice(&key);
    fixed[offset..offset + 1 + k].fill(true);
    scrub(&mut tokens, &fixed, &key, &[offset + 1], rng, FIRST_FILLER, VOCAB);
    tokens.push(QUERY);
    Ok(finish(tokens, &key, cfg.kind, 0))
}

/// A `[FACT, f_1..f_K]` sentence repeated `n_duplicates` times at random
/// non-overlapping places in filler, then ASK; the answer is the fact.
pub fn gen_dedup_qa(cfg: &TaskConfig, rng: &mut Rng) -> Result<PromptSample> {
    cfg.validate()?;
    let (l, k, n) = (cfg.length, cfg.key_length, cfg.n_duplicates);
    let fact: Vec<u32> = (0..k).map(|_| filler(rng, FIRST_FILLER, VOCAB)).collect();
    let free = l - 1 - n * (k + 1);
    // Insertion points among the free filler, sorted; equal points stack
    // blocks back to back.
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.below(free as u64 + 1) as usize).collect();
    cuts.sort_unstable();
    let mut tokens = Vec::with_capacity(l);
    let mut fixed = Vec::with_capacity(l);
    let mut starts = Vec::with_capacity(n);
    let mut prev = 0;
    for &c in &cuts {
        for _ in prev..c {
            tokens.push(filler(rng, FIRST_FILLER, VOCAB));
            fixed.push(false);
        }
        tokens.push(FACT);
        starts.push(tokens.len());
        tokens.extend_from_slice(&fact);
        fixed.extend(std::iter::repeat(true).take(k + 1));
        prev = c;
    }
    for _ in prev..free {
        tokens.push(filler(rng, FIRST_FILLER, VOCAB));
        fixed.push(false);
    }
    scrub(&mut tokens, &fixed, &fact, &starts, rng, FIRST_FILLER, VOCAB);
    tokens.push(ASK);
    Ok(finish(tokens, &fact, cfg.kind, 0))
}

/// `[COPY_OPEN, span, COPY_CLOSE]`, a distractor block, then COPY_QUERY;
/// the answer is the span. Span and distractors use disjoint ids.
pub fn gen_copy_distractor(cfg: &TaskConfig, rng: &mut Rng) -> Result<PromptSample> {
    cfg.validate()?;
    let (l, k) = (cfg.length, cfg.key_length);
    let span: Vec<u32> = (0..k).map(|_| filler(rng, COPY_SPLIT, VOCAB)).collect();
    let mut tokens = Vec::with_capacity(l + k);
    tokens.push(COPY_OPEN);
    tokens.extend_from_slice(&span);
    tokens.push(COPY_CLOSE);
    for _ in 0..l - k - 3 {
        tokens.push(filler(rng, FIRST_FILLER, COPY_SPLIT));
    }
    tokens.push(COPY_QUERY);
    Ok(finish(tokens, &span, cfg.kind, 0))
}

fn finish(mut prompt: Vec<u32>, answer: &[u32], task: TaskKind, seed: u64) -> PromptSample {
    let start = prompt.len();
    prompt.extend_from_slice(answer);
    PromptSample {
        answer_span: (start, prompt.len()),
        tokens: prompt,
        task,
        metric: task.metric(),
        seed,
    }
}

/// One sample drawn from a fresh generator seeded with `seed`. The
/// `gen_*` functions leave `seed` at 0 since they only see the generator.
pub fn gen_sample(cfg: &TaskConfig, seed: u64) -> Result<PromptSample> {
    let mut rng = Rng::new(seed);
    let mut s = match cfg.kind {
        TaskKind::Passkey => gen_passkey(cfg, &mut rng)?,
        TaskKind::DedupQa => gen_dedup_qa(cfg, &mut rng)?,
        TaskKind::CopyDistractor => gen_copy_distractor(cfg, &mut rng)?,
    };
    s.seed = seed;
    Ok(s)
}

pub fn score_sample(pred: &[u32], sample: &PromptSample) -> f64 {
    let answer = sample.answer();
    match sample.metric {
        Metric::ExactMatch => (pred == answer) as u8 as f64,
        Metric::TokenAccuracy => {
            if answer.is_empty() {
                return 1.0;
            }
            let hits = answer.iter().zip(pred).filter(|(a, p)| a == p).count();
            hits as f64 / answer.len() as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

const TEST_BIT: u64 = 1 << 63;

/// Seed of sample `index`: `seed ⊕ index`, with the top bit clear for the
/// training namespace and set for the test namespace.
pub fn sample_seed(seed: u64, index: u64, split: Split) -> u64 {
    let s = seed ^ index;
    match split {
        Split::Train => s & !TEST_BIT,
        Split::Test => s | TEST_BIT,
    }
}

pub fn make_eval_set(cfg: &TaskConfig, n: usize, seed: u64, split: Split) -> Result<Vec<PromptSample>> {
    if n == 0 {
        return Err(NammError::invalid("an eval set needs at least one sample"));
    }
    (0..n as u64)
        .map(|i| gen_sample(cfg, sample_seed(seed, i, split)))
        .collect()
}

/// `task_id<TAB>seed<TAB>space-separated tokens<TAB>start end`.
pub fn format_record(s: &PromptSample) -> String {
    let toks: Vec<String> = s.tokens.iter().map(u32::to_string).collect();
    format!(
        "{}\t{}\t{}\t{} {}",
        s.task.id(),
        s.seed,
        toks.join(" "),
        s.answer_span.0,
        s.answer_span.1
    )
}

pub fn parse_record(line: &str) -> Result<PromptSample> {
    let bad = |m: &str| NammError::invalid(format!("bad task record: {m}"));
    let fields: Vec<&str> = line.trim_end_matches(['\n', '\r']).split('\t').collect();
    if fields.len() != 4 {
        return Err(bad("expected 4 tab-separated fields"));
    }
    let task = TaskKind::from_id(fields[0])?;
    let seed = fields[1].parse().map_err(|_| bad("seed"))?;
    let tokens = fields[2]
        .split_whitespace()
        .map(|t| t.parse::<u32>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| bad("token"))?;
    let span: Vec<usize> = fields[3]
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad("span"))?;
    if span.len() != 2 || span[0] > span[1] || span[1] > tokens.len() {
        return Err(bad("span out of bounds"));
    }
    Ok(PromptSample {
        tokens,
        answer_span: (span[0], span[1]),
        task,
        metric: task.metric(),
        seed,
    })
}
