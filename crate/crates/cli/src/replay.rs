use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Result;
use nammkit_core::eviction::{EvictionPolicy, NammScorer};
use nammkit_core::scorer::MemoryModel;
use nammkit_core::trace::{replay, write_retention_csv, AttentionTrace, ReplayReport};
use serde::Serialize;

use crate::eval::{namm_policy, write_rows};
use crate::manifest::RunManifest;
use crate::{missing_input, required, resolve_in, ReplayArgs};

pub const RETENTION_FILE: &str = "retention.csv";
pub const HISTOGRAM_FILE: &str = "score_histogram.csv";
pub const FEATURES_FILE: &str = "features.csv";

#[derive(Serialize)]
struct HistogramRow {
    lo: f64,
    hi: f64,
    count: u64,
}

pub fn run(args: &ReplayArgs) -> Result<(ReplayReport, PathBuf)> {
    let cfg = args.common.load_config()?;
    let genome = resolve_in(
        &required("genome", args.genome.as_ref(), cfg.io.genome.as_ref(), "--genome or io.genome")?,
        "best.namm",
    );
    for p in [&genome, &args.trace] {
        if !p.exists() {
            return Err(missing_input(p));
        }
    }
    let mut model = MemoryModel::load(&genome)?;
    if let Some(t) = args.threshold_offset {
        model.threshold_offset = t;
    }
    let EvictionPolicy::Namm(scorer) = namm_policy(&cfg, &model)? else {
        unreachable!("namm_policy builds a learned policy")
    };
    let trace = AttentionTrace::load(&args.trace)?;
    let report = replay(&trace, Arc::<NammScorer>::clone(&scorer))?;

    let out = cfg.io.out_dir.clone();
    fs::create_dir_all(&out)?;
    write_retention_csv(fs::File::create(out.join(RETENTION_FILE))?, &report.retention_rows())?;
    let hist = report.histogram(args.bins.max(1));
    let edges = hist.edges();
    let rows: Vec<HistogramRow> = hist
        .counts
        .iter()
        .enumerate()
        .map(|(i, &count)| HistogramRow {
            lo: edges[i],
            hi: edges[i + 1],
            count,
        })
        .collect();
    write_rows(&out.join(HISTOGRAM_FILE), &rows)?;
    report.write_features_csv(fs::File::create(out.join(FEATURES_FILE))?)?;

    let mut manifest = RunManifest::new("replay", &cfg)?
        .seed("seed", args.common.seed)
        .input("trace", args.trace.display())
        .input("genome", genome.display());
    manifest.outputs = vec![RETENTION_FILE.into(), HISTOGRAM_FILE.into(), FEATURES_FILE.into()];
    manifest.save(&out)?;
    let kept: usize = report.records.iter().map(|r| r.retained.iter().filter(|&&k| k).count()).sum();
    let seen: usize = report.records.iter().map(|r| r.retained.len()).sum();
    println!("{} head updates replayed; {kept} of {seen} token scores kept", report.records.len());
    Ok((report, out))
}
