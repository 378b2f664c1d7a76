use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use nammkit_core::analysis::{dump_retained, write_prompt_stats, PromptProfile};
use nammkit_core::config::RunConfig;
use nammkit_core::eviction::{EvictionPolicy, NammScorer};
use nammkit_core::evolution::{normalized_score, run_prompt, seed_from, PromptRun};
use nammkit_core::lm::{continue_greedy, LmWeights, Session};
use nammkit_core::scorer::MemoryModel;
use nammkit_core::tasks::{make_eval_set, score_sample, PromptSample, Split, TaskConfig};
use nammkit_core::trace::{write_retention_csv, TraceExporter};
use nammkit_core::training::CHECKPOINT_FILE;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;
use crate::{missing_input, required, resolve_in, EvalArgs};

pub const RESULTS_FILE: &str = "results.csv";
pub const PROMPTS_FILE: &str = "prompts.csv";
pub const PROMPT_STATS_FILE: &str = "prompt_stats.csv";
pub const TRACE_DIR: &str = "traces";

/// One row of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub policy: String,
    pub n_prompts: usize,
    pub raw_score: f64,
    pub base_score: f64,
    pub normalized_score: f64,
    /// The base score was below the floor and the floor was used.
    pub base_floored: bool,
    pub cache_size: f64,
    pub cache_fraction: f64,
    pub mean_prompt_len: f64,
}

/// One row of `prompts.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    pub task: String,
    pub prompt: usize,
    pub prompt_len: usize,
    pub score: f64,
    pub base_score: f64,
    pub cache_size: f64,
    pub cache_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub results: Vec<TaskResult>,
    pub prompts: Vec<PromptResult>,
    pub out_dir: PathBuf,
}

/// Paths of one exported prompt, relative to the run directory.
pub fn trace_paths(task: &str, prompt: usize) -> (String, String, String) {
    let stem = format!("{TRACE_DIR}/{task}_{prompt}");
    (format!("{stem}.atrc"), format!("{stem}.retention.csv"), format!("{stem}.retained.txt"))
}

/// Held-out prompts `eval` scores for `task` under `seed`.
pub fn eval_set(task: &TaskConfig, n: usize, seed: u64) -> Result<Vec<PromptSample>> {
    Ok(make_eval_set(task, n, eval_seed(seed), Split::Test)?)
}

pub fn eval_seed(seed: u64) -> u64 {
    seed_from(&[seed, 20])
}

/// Builds the policy named by `args` from the config and, for `namm`, the
/// genome file.
pub fn build_policy(args: &EvalArgs, cfg: &mut RunConfig) -> Result<(EvictionPolicy, Option<PathBuf>)> {
    if args.policy != "namm" {
        if let Some(b) = args.budget {
            cfg.policy.budget = Some(b);
        }
        cfg.validate()?;
        return Ok((cfg.policy.baseline(&args.policy)?, None));
    }
    let path = resolve_in(
        &required("genome", args.genome.as_ref(), cfg.io.genome.as_ref(), "--genome or io.genome")?,
        "best.namm",
    );
    if !path.exists() {
        return Err(missing_input(&path));
    }
    let mut model = MemoryModel::load(&path)?;
    if let Some(t) = args.threshold_offset {
        model.threshold_offset = t;
    }
    Ok((namm_policy(cfg, &model)?, Some(path)))
}

pub fn namm_policy(cfg: &RunConfig, model: &MemoryModel) -> Result<EvictionPolicy> {
    let p = &cfg.policy;
    let scorer = NammScorer::new(model, p.n_w, p.s_w, p.gamma)?.with_granularity(p.granularity);
    Ok(EvictionPolicy::Namm(Arc::new(scorer)))
}

struct TracedPrompt {
    run: PromptRun,
    trace: Vec<u8>,
    retention: Vec<u8>,
    retained: String,
}

/// [`run_prompt`] with the attention of every update written to a trace.
fn run_traced(lm: &LmWeights, policy: &EvictionPolicy, sample: &PromptSample, n_up: usize) -> Result<TracedPrompt> {
    let c = lm.config();
    let mut session = Session::new(lm, policy.clone(), n_up)?.capture_attention();
    let mut exporter = TraceExporter::new(Vec::new(), c.n_layers, c.n_heads)?;
    session.feed(sample.prompt(), &mut exporter)?;
    let cache_size = session.cache().mean_len();
    let stats = session.cache().stats(session.step());
    let mut retained = String::new();
    for layer in dump_retained(session.cache(), sample.prompt())? {
        retained.push_str(&format!("layer {}: {}\n", layer.layer, layer.render(sample.prompt(), |t| t.to_string())));
    }
    let output = continue_greedy(&mut session, sample.answer().len(), &mut exporter)?;
    let (trace, rows) = exporter.finish()?;
    let mut retention = Vec::new();
    write_retention_csv(&mut retention, &rows)?;
    Ok(TracedPrompt {
        run: PromptRun {
            score: score_sample(&output, sample),
            output,
            prompt_len: sample.prompt().len(),
            cache_size,
            stats,
        },
        trace,
        retention,
        retained,
    })
}

pub fn run(args: &EvalArgs) -> Result<EvalOutcome> {
    let mut cfg = args.common.load_config()?;
    let (policy, genome) = build_policy(args, &mut cfg)?;
    let lm_path = resolve_in(
        &required("language model", args.lm.as_ref(), cfg.io.lm_checkpoint.as_ref(), "--lm or io.lm_checkpoint")?,
        CHECKPOINT_FILE,
    );
    if !lm_path.exists() {
        return Err(missing_input(&lm_path));
    }
    let lm = LmWeights::load(&lm_path)?;
    let out = cfg.io.out_dir.clone();
    fs::create_dir_all(&out)?;
    let seed = args.common.seed;
    let mut manifest = RunManifest::new("eval", &cfg)?
        .seed("seed", seed)
        .seed("eval_seed", eval_seed(seed))
        .input("policy", &args.policy)
        .input("lm", lm_path.display())
        .input("lm_fingerprint", lm.fingerprint());
    if let Some(g) = &genome {
        manifest = manifest.input("genome", g.display());
    }
    manifest.outputs = vec![RESULTS_FILE.into(), PROMPTS_FILE.into(), PROMPT_STATS_FILE.into()];

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.common.workers())
        .build()
        .context("worker pool")?;
    let n_up = cfg.policy.n_up;
    let n_traced = cfg.io.trace_prompts.min(cfg.io.eval_size);
    if n_traced > 0 {
        fs::create_dir_all(out.join(TRACE_DIR))?;
    }
    let mut results = Vec::new();
    let mut prompts = Vec::new();
    let mut profiles = Vec::new();
    for task in &cfg.tasks {
        let id = task.kind.id();
        let samples = eval_set(task, cfg.io.eval_size, seed)?;
        let (base, runs): (Vec<f64>, Vec<PromptRun>) = pool.install(|| {
            samples
                .par_iter()
                .enumerate()
                .map(|(i, s)| -> Result<(f64, PromptRun)> {
                    let run = if i < n_traced {
                        let t = run_traced(&lm, &policy, s, n_up)?;
                        let (trace, retention, retained) = trace_paths(id, i);
                        fs::write(out.join(trace), &t.trace)?;
                        fs::write(out.join(retention), &t.retention)?;
                        fs::write(out.join(retained), &t.retained)?;
                        t.run
                    } else {
                        run_prompt(&lm, &policy, s, n_up)?
                    };
                    let base = if matches!(policy, EvictionPolicy::Full) {
                        run.score
                    } else {
                        run_prompt(&lm, &EvictionPolicy::Full, s, n_up)?.score
                    };
                    Ok((base, run))
                })
                .collect::<Result<Vec<_>>>()
                .map(|v| v.into_iter().unzip())
        })?;
        for (i, (r, &b)) in runs.iter().zip(&base).enumerate() {
            prompts.push(PromptResult {
                task: id.to_string(),
                prompt: i,
                prompt_len: r.prompt_len,
                score: r.score,
                base_score: b,
                cache_size: r.cache_size,
                cache_fraction: r.cache_size / r.prompt_len as f64,
            });
            profiles.push(PromptProfile::from_stats(id, r.prompt_len, &r.stats));
        }
        let k = runs.len() as f64;
        let raw = runs.iter().map(|r| r.score).sum::<f64>() / k;
        let base_score = base.iter().sum::<f64>() / k;
        let (normalized, floored) = normalized_score(raw, base_score);
        let result = TaskResult {
            task: id.to_string(),
            policy: args.policy.clone(),
            n_prompts: runs.len(),
            raw_score: raw,
            base_score,
            normalized_score: normalized,
            base_floored: floored,
            cache_size: runs.iter().map(|r| r.cache_size).sum::<f64>() / k,
            cache_fraction: runs.iter().map(|r| r.cache_size / r.prompt_len as f64).sum::<f64>() / k,
            mean_prompt_len: runs.iter().map(|r| r.prompt_len as f64).sum::<f64>() / k,
        };
        println!(
            "{id}: raw {:.4} base {:.4} normalized {:.4} cache {:.1} ({:.3})",
            result.raw_score, result.base_score, result.normalized_score, result.cache_size, result.cache_fraction
        );
        results.push(result);
        for i in 0..n_traced {
            let (a, b, c) = trace_paths(id, i);
            manifest.outputs.extend([a, b, c]);
        }
    }
    write_rows(&out.join(RESULTS_FILE), &results)?;
    write_rows(&out.join(PROMPTS_FILE), &prompts)?;
    write_prompt_stats(fs::File::create(out.join(PROMPT_STATS_FILE))?, &profiles)?;
    manifest.save(&out)?;
    Ok(EvalOutcome {
        results,
        prompts,
        out_dir: out,
    })
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .map(|row| row.with_context(|| format!("parsing {}", path.display())))
        .collect()
}
