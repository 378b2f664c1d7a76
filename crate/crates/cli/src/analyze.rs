use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use nammkit_core::analysis::{layer_task_profile, read_prompt_stats, score_sensitivity, LayerTaskProfile, SensitivityReport, SENSITIVITY_EPSILON};
use nammkit_core::error::NammError;
use nammkit_core::eviction::EvictionPolicy;
use nammkit_core::numerics::Matrix;
use nammkit_core::scorer::{decode_genome, MemoryModel};
use nammkit_core::spectrogram::FEATURE_DIM;
use nammkit_core::trace::{replay, AttentionTrace};
use serde::{Deserialize, Serialize};

use crate::eval::{namm_policy, write_rows, PROMPT_STATS_FILE, RESULTS_FILE};
use crate::manifest::{RunManifest, ARTIFACT_VERSION};
use crate::AnalyzeArgs;

pub const LAYER_PROFILE_FILE: &str = "layer_profile.csv";
pub const TASK_PROFILE_FILE: &str = "task_profile.csv";
pub const PROFILE_FILE: &str = "profile.json";
pub const SENSITIVITY_FEATURES_FILE: &str = "sensitivity_features.csv";
pub const SENSITIVITY_GRID_FILE: &str = "sensitivity_grid.csv";
pub const SENSITIVITY_FILE: &str = "sensitivity.json";

/// Where the sensitivity snapshot came from, plus its block totals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySummary {
    pub trace: String,
    pub layer: usize,
    pub head: usize,
    pub chunk: usize,
    pub n_tokens: usize,
    pub epsilon: f64,
    pub spectral_total: f64,
    pub positional_total: f64,
    /// Largest `|∂s_i/∂v_j|²` with `j < i`.
    pub max_below_diagonal: f64,
}

#[derive(Clone, Debug)]
pub struct AnalyzeOutcome {
    pub profile: LayerTaskProfile,
    pub sensitivity: Option<(SensitivityReport, SensitivitySummary)>,
    pub out_dir: PathBuf,
}

/// Checks that `dir` holds a complete eval run written by one version.
pub fn check_run_dir(dir: &Path) -> Result<RunManifest> {
    let eval_manifest = RunManifest::path(dir, "eval");
    let missing: Vec<String> = [eval_manifest.clone(), dir.join(RESULTS_FILE), dir.join(PROMPT_STATS_FILE)]
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(NammError::Config(format!("{} is missing: {}", dir.display(), missing.join(", "))).into());
    }
    let manifests = RunManifest::load_all(dir)?;
    for (path, m) in &manifests {
        if m.artifact_version != ARTIFACT_VERSION || m.tool_version != env!("CARGO_PKG_VERSION") {
            return Err(NammError::format(
                0,
                format!(
                    "{} was written by version {} (artifacts v{}), this is {} (artifacts v{ARTIFACT_VERSION}); mixed-version run directories are not analyzed",
                    path.display(),
                    m.tool_version,
                    m.artifact_version,
                    env!("CARGO_PKG_VERSION")
                ),
            )
            .into());
        }
    }
    let eval = RunManifest::load(&eval_manifest)?;
    let listed: Vec<String> = eval
        .outputs
        .iter()
        .filter(|f| !dir.join(f).exists())
        .cloned()
        .collect();
    if !listed.is_empty() {
        return Err(NammError::Config(format!("{} is missing: {}", dir.display(), listed.join(", "))).into());
    }
    Ok(eval)
}

pub fn run(args: &AnalyzeArgs) -> Result<AnalyzeOutcome> {
    let dir = &args.run_dir;
    let eval = check_run_dir(dir)?;
    let out = args.out.clone().unwrap_or_else(|| dir.join("analysis"));
    fs::create_dir_all(&out)?;

    let prompts = read_prompt_stats(fs::File::open(dir.join(PROMPT_STATS_FILE))?)?;
    let profile = layer_task_profile(&prompts)?;
    write_rows(&out.join(LAYER_PROFILE_FILE), &profile.layers)?;
    write_rows(&out.join(TASK_PROFILE_FILE), &profile.tasks)?;
    fs::write(out.join(PROFILE_FILE), serde_json::to_vec_pretty(&profile)?)?;
    println!("size/length correlation {:.4}", profile.size_length_pearson);
    let mut outputs = vec![LAYER_PROFILE_FILE.to_string(), TASK_PROFILE_FILE.into(), PROFILE_FILE.into()];

    let sensitivity = match sensitivity_snapshot(dir, &eval, args.max_tokens)? {
        Some((report, summary)) => {
            report.write_features_csv(fs::File::create(out.join(SENSITIVITY_FEATURES_FILE))?)?;
            report.write_grid_csv(fs::File::create(out.join(SENSITIVITY_GRID_FILE))?)?;
            fs::write(out.join(SENSITIVITY_FILE), serde_json::to_vec_pretty(&summary)?)?;
            outputs.extend([SENSITIVITY_FEATURES_FILE.into(), SENSITIVITY_GRID_FILE.into(), SENSITIVITY_FILE.into()]);
            println!(
                "sensitivity on {} tokens: spectral {:.4e} positional {:.4e}",
                summary.n_tokens, summary.spectral_total, summary.positional_total
            );
            Some((report, summary))
        }
        None => {
            println!("no learned policy traces in {}; sensitivity skipped", dir.display());
            None
        }
    };

    let mut manifest = RunManifest::new("analyze", &eval.config)?.input("run_dir", dir.display());
    manifest.seeds = eval.seeds.clone();
    manifest.outputs = outputs;
    manifest.save(&out)?;
    Ok(AnalyzeOutcome {
        profile,
        sensitivity,
        out_dir: out,
    })
}

/// Replays the first exported trace and differentiates the scorer on the
/// largest head snapshot, capped at `max_tokens` oldest tokens.
fn sensitivity_snapshot(
    dir: &Path,
    eval: &RunManifest,
    max_tokens: usize,
) -> Result<Option<(SensitivityReport, SensitivitySummary)>> {
    let (Some(genome), Some(trace_file)) = (
        eval.inputs.get("genome"),
        eval.outputs.iter().find(|f| f.ends_with(".atrc")),
    ) else {
        return Ok(None);
    };
    let genome = PathBuf::from(genome);
    if !genome.exists() {
        return Err(NammError::Config(format!("{} is missing: {}", dir.display(), genome.display())).into());
    }
    let model = MemoryModel::load(&genome)?;
    let EvictionPolicy::Namm(scorer) = namm_policy(&eval.config, &model)? else {
        unreachable!("namm_policy builds a learned policy")
    };
    let report = replay(&AttentionTrace::load(&dir.join(trace_file))?, scorer)?;
    let Some(rec) = report.records.iter().max_by_key(|r| (r.features.len(), std::cmp::Reverse(r.chunk))) else {
        return Ok(None);
    };
    let n = rec.features.len().min(max_tokens.max(1));
    if n == 0 {
        return Ok(None);
    }
    let features = Matrix::from_fn(n, FEATURE_DIM, |i, k| rec.features[i].0[k]);
    let weights = decode_genome(&model.genome)?;
    let sens = score_sensitivity(&weights, &features, SENSITIVITY_EPSILON)?;
    let (spectral_total, positional_total) = sens.block_totals();
    let mut max_below_diagonal: f64 = 0.0;
    for i in 0..n {
        for j in 0..i {
            max_below_diagonal = max_below_diagonal.max(sens.cross_grid[(i, j)]);
        }
    }
    let summary = SensitivitySummary {
        trace: trace_file.clone(),
        layer: rec.layer,
        head: rec.head,
        chunk: rec.chunk,
        n_tokens: n,
        epsilon: SENSITIVITY_EPSILON,
        spectral_total,
        positional_total,
        max_below_diagonal,
    };
    Ok(Some((sens, summary)))
}
