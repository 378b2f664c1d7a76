use anyhow::Result;
use nammkit_core::evolution::{Checkpoint, Evolution, NammSetup};
use nammkit_core::lm::LmWeights;
use nammkit_core::spectrogram::NormScales;
use nammkit_core::training::CHECKPOINT_FILE;

use crate::manifest::RunManifest;
use crate::{missing_input, required, resolve_in, EvolveArgs};

pub fn run(args: &EvolveArgs) -> Result<Checkpoint> {
    let mut cfg = args.common.load_config()?;
    if let Some(t) = args.threshold_offset {
        cfg.policy.threshold_offset = t;
    }
    cfg.validate()?;
    let lm_path = resolve_in(
        &required("language model", args.lm.as_ref(), cfg.io.lm_checkpoint.as_ref(), "--lm or io.lm_checkpoint")?,
        CHECKPOINT_FILE,
    );
    if !lm_path.exists() {
        return Err(missing_input(&lm_path));
    }
    let lm = LmWeights::load(&lm_path)?;
    let out = cfg.io.out_dir.clone();
    std::fs::create_dir_all(&out)?;
    let workers = args.common.workers();
    let mut manifest = RunManifest::new("evolve", &cfg)?
        .seed("seed", args.common.seed)
        .input("lm", lm_path.display())
        .input("lm_fingerprint", lm.fingerprint())
        .input("workers", workers);
    manifest.outputs = vec!["best.namm".into(), "manifest.json".into(), "scales.json".into()];
    manifest.save(&out)?;

    let p = &cfg.policy;
    let mut evo = Evolution {
        lm: &lm,
        config: cfg.evolution.clone(),
        tasks: cfg.tasks.clone(),
        setup: NammSetup {
            scales: NormScales::default(),
            threshold_offset: p.threshold_offset,
            granularity: p.granularity,
            n_w: p.n_w,
            s_w: p.s_w,
            gamma: p.gamma,
        },
        n_up: p.n_up,
        seed: args.common.seed,
        workers,
        out_dir: out.clone(),
    };
    let ckpt = evo.run()?;
    let m = &ckpt.manifest;
    println!(
        "best normalized score {:.4} at cache fraction {:.3} (phase {}, generation {}); genome {}",
        m.best_score,
        m.best_cache_fraction,
        m.phase,
        m.best_generation,
        out.join("best.namm").display()
    );
    Ok(ckpt)
}
