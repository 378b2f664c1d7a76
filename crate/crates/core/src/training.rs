//! Training the toy language model on the synthetic tasks.
//!
//! Batches are a pure function of `(seed, step)`, so a run stopped at a
//! checkpoint and resumed ends with the same weights as an uninterrupted
//! one. Prompt lengths follow a curriculum: the longest training prompt
//! grows linearly from `curriculum_start` to the task length over
//! `curriculum_steps`, after which lengths stay uniform over that range.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NammError, Result};
use crate::eviction::EvictionPolicy;
use crate::evolution::{seed_from, write_atomic};
use crate::lm::{generate, train_step, AdamConfig, AdamState, LmConfig, LmWeights, TrainExample};
use crate::numerics::Rng;
use crate::tasks::{gen_sample, make_eval_set, sample_seed, score_sample, Split, TaskConfig, TaskKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Held-out prompts per task at each evaluation.
    pub eval_size: usize,
    /// Training stops once every task reaches this full-cache score.
    pub target_score: f64,
    pub curriculum_start: usize,
    pub curriculum_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            max_steps: 20_000,
            eval_every: 200,
            eval_size: 64,
            target_score: 0.95,
            curriculum_start: 32,
            curriculum_steps: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(NammError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_size == 0 {
            return Err(NammError::Config(
                "batch_size, eval_every and eval_size must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.target_score) {
            return Err(NammError::Config(format!(
                "target_score must lie in [0, 1], got {}",
                self.target_score
            )));
        }
        Ok(())
    }

    /// Length range `[lo, hi]` for training prompts of `task` at `step`.
    pub fn length_range(&self, task: &TaskConfig, step: usize) -> (usize, usize) {
        let full = task.length;
        let lo = self.curriculum_start.clamp(task.min_length(), full);
        let hi = if self.curriculum_steps == 0 {
            full
        } else {
            lo + (full - lo) * step.min(self.curriculum_steps) / self.curriculum_steps
        };
        (lo, hi)
    }
}

/// Training examples for one step; task `i % tasks.len()` for example `i`.
pub fn training_batch(cfg: &TrainConfig, tasks: &[TaskConfig], seed: u64, step: usize) -> Result<Vec<TrainExample>> {
    let batch_seed = seed_from(&[seed, 10, step as u64]);
    let mut lengths = Rng::new(seed_from(&[seed, 12, step as u64]));
    (0..cfg.batch_size)
        .map(|i| {
            let mut task = tasks[i % tasks.len()];
            let (lo, hi) = cfg.length_range(&task, step);
            task.length = lo + lengths.below((hi - lo + 1) as u64) as usize;
            Ok(gen_sample(&task, sample_seed(batch_seed, i as u64, Split::Train))?.train_example())
        })
        .collect()
}

/// Mean full-cache score of `w` on `n` held-out prompts of `task`.
pub fn evaluate_lm(w: &LmWeights, task: &TaskConfig, n: usize, seed: u64) -> Result<f64> {
    let set = make_eval_set(task, n, seed, Split::Test)?;
    let mut total = 0.0;
    for s in &set {
        let out = generate(w, &EvictionPolicy::Full, s.prompt(), s.answer().len(), s.prompt().len().max(1))?;
        total += score_sample(&out, s);
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainProgress {
    fingerprint: String,
    step: usize,
    scores: Vec<(TaskKind, f64)>,
    done: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: LmWeights,
    pub steps: usize,
    /// Full-cache held-out score per task at the last evaluation.
    pub scores: Vec<(TaskKind, f64)>,
    pub reached_target: bool,
    /// Loss of the untrained model on the first batch.
    pub initial_loss: Option<f64>,
}

/// A training run writing `lm.tylm`, `adam.bin`, `train_state.json` and
/// `train_log.csv` into `out_dir`, resuming from them when present.
pub struct TrainRun<'a> {
    pub lm: LmConfig,
    pub train: TrainConfig,
    pub tasks: &'a [TaskConfig],
    pub seed: u64,
    pub out_dir: PathBuf,
}

pub const CHECKPOINT_FILE: &str = "lm.tylm";
const ADAM_FILE: &str = "adam.bin";
const STATE_FILE: &str = "train_state.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

impl TrainRun<'_> {
    /// Identifies the run; the step budget is left out so that a finished
    /// run can be extended.
    fn fingerprint(&self) -> Result<String> {
        let train = TrainConfig {
            max_steps: 0,
            ..self.train.clone()
        };
        let doc = serde_json::to_vec(&(&self.lm, &train, self.tasks, self.seed))?;
        Ok(format!("{:x}", Sha256::digest(doc)))
    }

    fn log_header(&self) -> String {
        let mut h = String::from("step,loss");
        for t in self.tasks {
            h.push_str(&format!(",{}_score", t.kind.id()));
        }
        h
    }

    fn checkpoint(&self, w: &LmWeights, adam: &AdamState, progress: &TrainProgress) -> Result<()> {
        let mut buf = Vec::new();
        w.write_to(&mut buf)?;
        write_atomic(&self.out_dir.join(CHECKPOINT_FILE), &buf)?;
        let mut buf = Vec::new();
        adam.write_to(&mut buf)?;
        write_atomic(&self.out_dir.join(ADAM_FILE), &buf)?;
        write_atomic(&self.out_dir.join(STATE_FILE), &serde_json::to_vec_pretty(progress)?)
    }

    /// Keeps the header and the rows of the first `steps` steps.
    fn truncate_log(&self, steps: usize) -> Result<()> {
        let path = self.out_dir.join(TRAIN_LOG_FILE);
        let mut kept = vec![self.log_header()];
        if path.exists() {
            for line in BufReader::new(fs::File::open(&path)?).lines().skip(1) {
                let line = line?;
                let s: usize = line.split(',').next().and_then(|f| f.parse().ok()).unwrap_or(usize::MAX);
                if s < steps {
                    kept.push(line);
                }
            }
        }
        write_atomic(&path, (kept.join("\n") + "\n").as_bytes())
    }

    pub fn run(&self) -> Result<TrainOutcome> {
        self.lm.validate()?;
        self.train.validate()?;
        if self.tasks.is_empty() {
            return Err(NammError::Config("training needs at least one task".into()));
        }
        for t in self.tasks {
            t.validate()?;
            if t.length + t.key_length > self.lm.max_context {
                return Err(NammError::Config(format!(
                    "{} prompts of {} tokens plus the answer exceed the context of {}",
                    t.kind.id(),
                    t.length,
                    self.lm.max_context
                )));
            }
        }
        fs::create_dir_all(&self.out_dir)?;
        let fingerprint = self.fingerprint()?;
        let adam_cfg = AdamConfig {
            lr: self.train.lr,
            ..Default::default()
        };
        let state_path = self.out_dir.join(STATE_FILE);
        let (mut w, mut adam, mut progress) = if state_path.exists() {
            let progress: TrainProgress = serde_json::from_slice(&fs::read(&state_path)?)?;
            if progress.fingerprint != fingerprint {
                return Err(NammError::Config(format!(
                    "{} belongs to a run with different settings",
                    state_path.display()
                )));
            }
            let w = LmWeights::load(&self.out_dir.join(CHECKPOINT_FILE))?;
            let adam = AdamState::read_from(fs::File::open(self.out_dir.join(ADAM_FILE))?, adam_cfg)?;
            log::info!("resuming training at step {}", progress.step);
            (w, adam, progress)
        } else {
            let w = LmWeights::init(self.lm, seed_from(&[self.seed, 11]))?;
            let adam = AdamState::new(adam_cfg, self.lm.param_count());
            let progress = TrainProgress {
                fingerprint,
                step: 0,
                scores: Vec::new(),
                done: false,
            };
            (w, adam, progress)
        };
        self.truncate_log(progress.step)?;
        let mut log = fs::OpenOptions::new()
            .append(true)
            .open(self.out_dir.join(TRAIN_LOG_FILE))?;
        let mut initial_loss = None;

        while !progress.done && progress.step < self.train.max_steps {
            let step = progress.step;
            let batch = training_batch(&self.train, self.tasks, self.seed, step)?;
            let loss = match train_step(&mut w, &batch, &mut adam) {
                Ok(l) => l,
                Err(e) => {
                    writeln!(log, "{step},NaN")?;
                    log.flush()?;
                    return Err(e);
                }
            };
            if step == 0 {
                initial_loss = Some(loss);
                log::info!("initial loss {loss:.4} (ln vocab = {:.4})", (self.lm.vocab as f64).ln());
            }
            progress.step += 1;
            let eval_now = progress.step % self.train.eval_every == 0 || progress.step == self.train.max_steps;
            let mut row = format!("{step},{loss}");
            if eval_now {
                progress.scores = self
                    .tasks
                    .iter()
                    .map(|t| Ok((t.kind, evaluate_lm(&w, t, self.train.eval_size, self.seed)?)))
                    .collect::<Result<_>>()?;
                for (_, s) in &progress.scores {
                    row.push_str(&format!(",{s}"));
                }
                progress.done = progress.scores.iter().all(|&(_, s)| s >= self.train.target_score);
                log::info!("step {} loss {loss:.4} scores {:?}", progress.step, progress.scores);
            } else {
                row.push_str(&",".repeat(self.tasks.len()));
            }
            writeln!(log, "{row}")?;
            if eval_now {
                log.flush()?;
                self.checkpoint(&w, &adam, &progress)?;
            }
        }
        log.flush()?;
        self.checkpoint(&w, &adam, &progress)?;
        Ok(TrainOutcome {
            reached_target: progress.done,
            steps: progress.step,
            scores: progress.scores,
            weights: w,
            initial_loss,
        })
    }
}

/// Loads the checkpoint a [`TrainRun`] wrote into `dir`.
pub fn load_trained(dir: &Path) -> Result<LmWeights> {
    LmWeights::load(&dir.join(CHECKPOINT_FILE))
}
