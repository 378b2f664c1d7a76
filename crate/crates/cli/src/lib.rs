//! The `nammkit` command line: argument parsing, config resolution and
//! one module per subcommand. Commands are plain functions so tests can
//! drive them in-process.

use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use nammkit_core::config::RunConfig;
use nammkit_core::error::NammError;

pub mod analyze;
pub mod eval;
pub mod evolve;
pub mod gen_tasks;
pub mod manifest;
pub mod replay;
pub mod train;

#[derive(Debug, Parser)]
#[command(name = "nammkit", version, about = "Learned KV-cache eviction for a toy transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy language model on the configured tasks.
    TrainLm(CommonArgs),
    /// Evolve a memory model over a frozen language model.
    Evolve(EvolveArgs),
    /// Score an eviction policy on held-out prompts.
    Eval(EvalArgs),
    /// Apply a memory model to a recorded attention trace.
    Replay(ReplayArgs),
    /// Summarize an eval run directory.
    Analyze(AnalyzeArgs),
    /// Print task samples as line records.
    GenTasks(GenTasksArgs),
}

#[derive(Clone, Debug, Default, Args)]
pub struct CommonArgs {
    /// Run config (JSON). Defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; overrides `io.out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "NAMMKIT_WORKERS")]
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, Default, Args)]
pub struct EvolveArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Language model checkpoint (file or training directory).
    #[arg(long)]
    pub lm: Option<PathBuf>,
    /// Added to every score before the keep/evict test.
    #[arg(long)]
    pub threshold_offset: Option<f64>,
}

#[derive(Clone, Debug, Default, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Language model checkpoint (file or training directory).
    #[arg(long)]
    pub lm: Option<PathBuf>,
    #[arg(long, default_value = "full", value_parser = clap::builder::PossibleValuesParser::new(nammkit_core::config::POLICY_NAMES))]
    pub policy: String,
    /// Memory model file or evolution directory, for `--policy namm`.
    #[arg(long)]
    pub genome: Option<PathBuf>,
    /// Cache budget in tokens for l2, h2o and recency.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Overrides the memory model's threshold offset.
    #[arg(long)]
    pub threshold_offset: Option<f64>,
}

#[derive(Clone, Debug, Default, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// ATRC trace file.
    #[arg(long)]
    pub trace: PathBuf,
    /// Memory model file or evolution directory.
    #[arg(long)]
    pub genome: Option<PathBuf>,
    /// Overrides the memory model's threshold offset.
    #[arg(long)]
    pub threshold_offset: Option<f64>,
    /// Score histogram bins.
    #[arg(long, default_value_t = 32)]
    pub bins: usize,
}

#[derive(Clone, Debug, Default, Args)]
pub struct AnalyzeArgs {
    /// Directory written by `eval`.
    pub run_dir: PathBuf,
    /// Defaults to `<run_dir>/analysis`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Largest token set used for the sensitivity grid.
    #[arg(long, default_value_t = 32)]
    pub max_tokens: usize,
}

#[derive(Clone, Debug, Default, Args)]
pub struct GenTasksArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Task id; every configured task when absent.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    pub split: String,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainLm(a) => train::run(&a).map(|_| ()),
        Command::Evolve(a) => evolve::run(&a).map(|_| ()),
        Command::Eval(a) => eval::run(&a).map(|_| ()),
        Command::Replay(a) => replay::run(&a).map(|_| ()),
        Command::Analyze(a) => analyze::run(&a).map(|_| ()),
        Command::GenTasks(a) => gen_tasks::run(&a, &mut std::io::stdout().lock()),
    }
}

/// Process exit code for an error: 2 config, 3 divergence, 4 format,
/// 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<NammError>() {
            return match e {
                NammError::Config(_) => 2,
                NammError::Diverged(_) => 3,
                NammError::Format { .. } => 4,
                _ => 1,
            };
        }
        if cause.downcast_ref::<clap::Error>().is_some() {
            return 2;
        }
    }
    1
}

impl CommonArgs {
    /// The config with command-line overrides applied.
    pub fn load_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.io.out_dir = out.clone();
        }
        Ok(cfg)
    }

    pub fn workers(&self) -> usize {
        self.workers
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

/// `path` itself, or `file` inside it when it is a directory.
pub fn resolve_in(path: &Path, file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(file)
    } else {
        path.to_path_buf()
    }
}

fn required(what: &str, flag: Option<&PathBuf>, key: Option<&PathBuf>, hint: &str) -> Result<PathBuf> {
    flag.or(key)
        .cloned()
        .ok_or_else(|| NammError::Config(format!("no {what} given; pass {hint}")).into())
}

fn missing_input(path: &Path) -> anyhow::Error {
    NammError::Config(format!("{} does not exist", path.display())).into()
}
