use std::fs;

use anyhow::Result;
use nammkit_core::training::{TrainOutcome, TrainRun, CHECKPOINT_FILE, TRAIN_LOG_FILE};

use crate::manifest::RunManifest;
use crate::CommonArgs;

pub fn run(args: &CommonArgs) -> Result<TrainOutcome> {
    let cfg = args.load_config()?;
    let out = cfg.io.out_dir.clone();
    fs::create_dir_all(&out)?;
    let mut manifest = RunManifest::new("train", &cfg)?.seed("seed", args.seed);
    manifest.outputs = vec![CHECKPOINT_FILE.into(), TRAIN_LOG_FILE.into()];
    manifest.save(&out)?;

    let outcome = TrainRun {
        lm: cfg.lm.model,
        train: cfg.lm.train.clone(),
        tasks: &cfg.tasks,
        seed: args.seed,
        out_dir: out.clone(),
    }
    .run()?;
    if let Some(l) = outcome.initial_loss {
        println!("initial loss {l:.4} (ln vocab {:.4})", (cfg.lm.model.vocab as f64).ln());
    }
    for (kind, s) in &outcome.scores {
        println!("{}: {s:.4}", kind.id());
    }
    println!(
        "{} steps, target {}; checkpoint {}",
        outcome.steps,
        if outcome.reached_target { "reached" } else { "not reached" },
        out.join(CHECKPOINT_FILE).display()
    );
    let manifest = manifest.input("lm_fingerprint", outcome.weights.fingerprint());
    manifest.save(&out)?;
    Ok(outcome)
}
