use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn nammkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nammkit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("NAMMKIT_WORKERS", "1")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "lm": {"model": {"vocab": 64, "d_model": 16, "n_heads": 2, "n_layers": 2, "d_ff": 32, "max_context": 128},
         "train": {"batch_size": 4, "max_steps": 4, "eval_every": 2, "eval_size": 4}},
  "tasks": [{"kind": "passkey", "length": 96, "key_length": 2}, {"kind": "dedup_qa", "length": 96, "key_length": 2}],
  "policy": {"n_up": 32},
  "evolution": {"popsize": 4, "batch_size": 2, "eval_size": 3, "calibration_prompts": 2,
                "phases": [{"tasks": ["passkey"], "generations": 1}, {"tasks": ["passkey", "dedup_qa"], "generations": 1}]},
  "io": {"eval_size": 4, "trace_prompts": 1}
}"#;

fn workspace(name: &str) -> (PathBuf, PathBuf) {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    let config = dir.join("tiny.json");
    fs::write(&config, TINY).unwrap();
    (dir, config)
}

#[test]
fn pipeline_runs_end_to_end() {
    let (dir, config) = workspace("cli_pipeline");
    let (lm, namm, eval, rep) = (dir.join("lm"), dir.join("namm"), dir.join("eval"), dir.join("replay"));
    ok(nammkit(&["train-lm", "--config", s(&config), "--out", s(&lm)]));
    assert!(lm.join("lm.tylm").exists() && lm.join("train_run.json").exists());
    ok(nammkit(&["evolve", "--config", s(&config), "--out", s(&namm), "--lm", s(&lm)]));
    for f in ["best.namm", "scales.json", "phase_0/curves.csv", "phase_1/state.bin", "evolve_run.json"] {
        assert!(namm.join(f).exists(), "{f}");
    }
    ok(nammkit(&["eval", "--config", s(&config), "--out", s(&eval), "--lm", s(&lm), "--policy", "namm", "--genome", s(&namm)]));
    let results = fs::read_to_string(eval.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 3, "{results}");
    let trace = eval.join("traces/passkey_0.atrc");
    ok(nammkit(&["replay", "--config", s(&config), "--out", s(&rep), "--trace", s(&trace), "--genome", s(&namm)]));
    assert!(rep.join("retention.csv").exists() && rep.join("score_histogram.csv").exists());

    ok(nammkit(&["analyze", s(&eval)]));
    let analysis = eval.join("analysis");
    let first = fs::read(analysis.join("layer_profile.csv")).unwrap();
    let sens = fs::read(analysis.join("sensitivity.json")).unwrap();
    ok(nammkit(&["analyze", s(&eval)]));
    assert_eq!(fs::read(analysis.join("layer_profile.csv")).unwrap(), first);
    assert_eq!(fs::read(analysis.join("sensitivity.json")).unwrap(), sens);

    // A manifest from another version makes the directory unanalyzable.
    let manifest = eval.join("eval_run.json");
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&manifest).unwrap()).unwrap();
    v["tool_version"] = "0.0.0-other".into();
    fs::write(eval.join("old_run.json"), v.to_string()).unwrap();
    assert_eq!(code(&nammkit(&["analyze", s(&eval)])), 4);
    fs::remove_file(eval.join("old_run.json")).unwrap();

    fs::remove_file(eval.join("prompt_stats.csv")).unwrap();
    assert_eq!(code(&nammkit(&["analyze", s(&eval)])), 2);
}

#[test]
fn usage_and_config_errors_exit_2() {
    let (dir, config) = workspace("cli_errors");
    assert_eq!(code(&nammkit(&["eval", "--policy", "nope"])), 2);
    assert_eq!(code(&nammkit(&["frobnicate"])), 2);
    assert_eq!(code(&nammkit(&["eval", "--config", s(&dir.join("absent.json"))])), 2);
    let missing_lm = dir.join("no_lm");
    assert_eq!(code(&nammkit(&["eval", "--config", s(&config), "--out", s(&dir.join("e")), "--lm", s(&missing_lm)])), 2);
    assert_eq!(code(&nammkit(&["gen-tasks", "--config", s(&config), "--task", "passkey", "--count", "0"])), 2);
    let bad = dir.join("bad.json");
    fs::write(&bad, r#"{"policy": {"n_up": 0}}"#).unwrap();
    assert_eq!(code(&nammkit(&["gen-tasks", "--config", s(&bad), "--task", "passkey"])), 2);
}

#[test]
fn corrupt_artifacts_exit_4() {
    let (dir, config) = workspace("cli_format");
    let lm = dir.join("lm.tylm");
    fs::write(&lm, b"not a checkpoint").unwrap();
    let out = nammkit(&["eval", "--config", s(&config), "--out", s(&dir.join("e")), "--lm", s(&lm)]);
    assert_eq!(code(&out), 4, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let trace = dir.join("bad.atrc");
    fs::write(&trace, b"ATRCxxxx").unwrap();
    let genome = dir.join("g.namm");
    fs::write(&genome, b"").unwrap();
    assert_eq!(code(&nammkit(&["replay", "--config", s(&config), "--trace", s(&trace), "--genome", s(&genome)])), 4);
}

#[test]
fn gen_tasks_is_deterministic_per_seed_and_split() {
    let (_dir, config) = workspace("cli_gen_tasks");
    let run = |seed: &str, split: &str| {
        ok(nammkit(&["gen-tasks", "--config", s(&config), "--task", "dedup_qa", "--count", "5", "--seed", seed, "--split", split])).stdout
    };
    let a = run("4", "test");
    assert_eq!(String::from_utf8_lossy(&a).lines().count(), 5);
    assert_eq!(a, run("4", "test"));
    assert_ne!(a, run("5", "test"));
    assert_ne!(a, run("4", "train"));
}

#[test]
fn worker_count_does_not_change_results() {
    let (dir, config) = workspace("cli_workers");
    let lm = dir.join("lm");
    ok(nammkit(&["train-lm", "--config", s(&config), "--out", s(&lm)]));
    let run = |workers: &str| {
        let (namm, eval) = (dir.join(format!("namm_{workers}")), dir.join(format!("eval_{workers}")));
        ok(nammkit(&["evolve", "--config", s(&config), "--out", s(&namm), "--lm", s(&lm), "--workers", workers]));
        ok(nammkit(&[
            "eval", "--config", s(&config), "--out", s(&eval), "--lm", s(&lm), "--policy", "namm", "--genome", s(&namm), "--workers", workers,
        ]));
        (fs::read(namm.join("best.namm")).unwrap(), fs::read(eval.join("prompts.csv")).unwrap())
    };
    assert_eq!(run("1"), run("3"));
}
