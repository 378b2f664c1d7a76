//! Run configuration: one JSON document with `lm`, `tasks`, `policy`,
//! `evolution` and `io` sections. Absent keys take their defaults and
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NammError, Result};
use crate::eviction::{EvictionPolicy, FastGenConfig, Granularity};
use crate::evolution::EvolutionConfig;
use crate::lm::LmConfig;
use crate::spectrogram::{default_gamma, POS_DIM, STRIDE, WINDOW};
use crate::tasks::{TaskConfig, TaskKind, VOCAB};
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmSection {
    pub model: LmConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub n_up: usize,
    pub n_w: usize,
    pub s_w: usize,
    pub gamma: f64,
    pub positional_dim: usize,
    pub threshold_offset: f64,
    pub granularity: Granularity,
    /// Cache budget for the recency, L2 and H2O baselines.
    pub budget: Option<usize>,
    /// H2O recent window; half the budget when absent.
    pub recent_window: Option<usize>,
    pub fastgen: FastGenConfig,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            n_up: 512,
            n_w: WINDOW,
            s_w: STRIDE,
            gamma: default_gamma(),
            positional_dim: POS_DIM,
            threshold_offset: 0.0,
            granularity: Granularity::PerHead,
            budget: None,
            recent_window: None,
            fastgen: FastGenConfig::default(),
        }
    }
}

/// Names accepted by `--policy`.
pub const POLICY_NAMES: [&str; 6] = ["full", "recency", "l2", "h2o", "fastgen", "namm"];

impl PolicySection {
    pub fn validate(&self) -> Result<()> {
        if self.n_w != WINDOW || self.s_w != STRIDE {
            return Err(NammError::Config(format!(
                "the feature pipeline is built for n_w = {WINDOW} and s_w = {STRIDE}, got {} and {}",
                self.n_w, self.s_w
            )));
        }
        if self.positional_dim != POS_DIM {
            return Err(NammError::Config(format!(
                "positional_dim must be {POS_DIM}, got {}",
                self.positional_dim
            )));
        }
        if self.n_up == 0 || self.n_up % self.s_w != 0 || self.n_up < self.n_w {
            return Err(NammError::Config(format!(
                "n_up {} must be a multiple of s_w = {} and at least n_w = {}",
                self.n_up, self.s_w, self.n_w
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(NammError::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !self.threshold_offset.is_finite() {
            return Err(NammError::Config("threshold_offset must be finite".into()));
        }
        if self.budget == Some(0) {
            return Err(NammError::Config("budget must be positive".into()));
        }
        self.fastgen.validate().map_err(|e| NammError::Config(e.to_string()))
    }

    /// A hand-designed policy by name. `namm` needs a genome and is built
    /// elsewhere.
    pub fn baseline(&self, name: &str) -> Result<EvictionPolicy> {
        let budget = || {
            self.budget
                .ok_or_else(|| NammError::Config(format!("policy {name} needs a budget")))
        };
        let policy = match name {
            "full" => EvictionPolicy::Full,
            "recency" => EvictionPolicy::Recency { budget: budget()? },
            "l2" => EvictionPolicy::L2 { budget: budget()? },
            "h2o" => {
                let b = budget()?;
                EvictionPolicy::H2o {
                    budget: b,
                    recent_window: self.recent_window.unwrap_or(b / 2),
                }
            }
            "fastgen" => EvictionPolicy::FastGen(self.fastgen),
            "namm" => {
                return Err(NammError::Config("the namm policy is built from a genome".into()));
            }
            other => {
                return Err(NammError::Config(format!(
                    "unknown policy '{other}', expected one of {}",
                    POLICY_NAMES.join(", ")
                )))
            }
        };
        policy.validate().map_err(|e| NammError::Config(e.to_string()))?;
        Ok(policy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub out_dir: PathBuf,
    /// Checkpoint directory or file of the trained model.
    pub lm_checkpoint: Option<PathBuf>,
    pub genome: Option<PathBuf>,
    /// Held-out prompts per task for `eval`.
    pub eval_size: usize,
    /// Prompts per task whose attention `eval` exports as traces.
    pub trace_prompts: usize,
}

impl Default for IoSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            lm_checkpoint: None,
            genome: None,
            eval_size: 64,
            trace_prompts: 0,
        }
    }
}

fn default_tasks() -> Vec<TaskConfig> {
    vec![
        TaskConfig::new(TaskKind::Passkey, 1024, 4),
        TaskConfig::new(TaskKind::DedupQa, 1024, 4),
        TaskConfig::new(TaskKind::CopyDistractor, 1024, 8),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub lm: LmSection,
    pub tasks: Vec<TaskConfig>,
    pub policy: PolicySection,
    pub evolution: EvolutionConfig,
    pub io: IoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lm: LmSection::default(),
            tasks: default_tasks(),
            policy: PolicySection::default(),
            evolution: EvolutionConfig::default(),
            io: IoSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates. Every failure is a [`NammError::Config`].
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| NammError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NammError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the compact JSON of the config with defaults filled in.
    pub fn hash(&self) -> Result<String> {
        Ok(format!("{:x}", Sha256::digest(serde_json::to_vec(self)?)))
    }

    pub fn task(&self, kind: TaskKind) -> Result<&TaskConfig> {
        self.tasks
            .iter()
            .find(|t| t.kind == kind)
            .ok_or_else(|| NammError::Config(format!("no settings for task {}", kind.id())))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: NammError| match e {
            NammError::Config(m) => NammError::Config(m),
            other => NammError::Config(other.to_string()),
        };
        self.lm.model.validate().map_err(cfg_err)?;
        self.lm.train.validate()?;
        self.policy.validate()?;
        self.evolution.validate().map_err(cfg_err)?;
        if self.lm.model.vocab < VOCAB as usize {
            return Err(NammError::Config(format!(
                "the tasks use {VOCAB} token ids but the model vocabulary is {}",
                self.lm.model.vocab
            )));
        }
        if self.tasks.is_empty() {
            return Err(NammError::Config("at least one task is required".into()));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            t.validate()?;
            if self.tasks[..i].iter().any(|u| u.kind == t.kind) {
                return Err(NammError::Config(format!("task {} is listed twice", t.kind.id())));
            }
            if t.length + t.key_length > self.lm.model.max_context {
                return Err(NammError::Config(format!(
                    "{} prompts of {} tokens plus the answer exceed the context of {}",
                    t.kind.id(),
                    t.length,
                    self.lm.model.max_context
                )));
            }
        }
        for phase in &self.evolution.phases {
            for &k in &phase.tasks {
                self.task(k)?;
            }
        }
        if self.io.eval_size == 0 {
            return Err(NammError::Config("io.eval_size must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::ArchId;

    #[test]
    fn empty_document_gives_table_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.policy.n_up, 512);
        assert_eq!((c.policy.n_w, c.policy.s_w, c.policy.positional_dim), (32, 16, 8));
        assert_eq!(c.policy.gamma, 0.99f64.powi(16));
        assert_eq!(c.evolution.sigma0, 0.65);
        assert_eq!(c.evolution.popsize, 32);
        assert_eq!(c.evolution.elite_ratio, 0.5);
        assert_eq!(c.evolution.batch_size, 64);
        assert_eq!(c.evolution.arch, ArchId::Bam);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [
            r#"{"bogus": 1}"#,
            r#"{"policy": {"n_upp": 512}}"#,
            r#"{"lm": {"model": {"depth": 3}}}"#,
            r#"{"lm": {"train": {"learning_rate": 0.1}}}"#,
            r#"{"evolution": {"pop": 8}}"#,
            r#"{"io": {"outdir": "x"}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(doc), Err(NammError::Config(_))), "{doc}");
        }
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::from_json(r#"{"policy": {"n_up": 64}, "evolution": {"popsize": 8}}"#).unwrap();
        assert_eq!(c.policy.n_up, 64);
        assert_eq!(c.policy.s_w, 16);
        assert_eq!(c.evolution.popsize, 8);
        assert_eq!(c.evolution.sigma0, 0.65);
    }

    #[test]
    fn update_interval_rules() {
        for (n_up, ok) in [(16, false), (24, false), (40, false), (32, true), (48, true), (512, true)] {
            let doc = format!(r#"{{"policy": {{"n_up": {n_up}}}}}"#);
            assert_eq!(RunConfig::from_json(&doc).is_ok(), ok, "n_up {n_up}");
        }
        assert!(RunConfig::from_json(r#"{"policy": {"n_w": 64, "s_w": 32}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"policy": {"positional_dim": 4}}"#).is_err());
    }

    #[test]
    fn cross_section_checks() {
        // A phase naming a task without settings.
        let doc = r#"{"tasks": [{"kind": "passkey", "length": 128, "key_length": 4}]}"#;
        assert!(RunConfig::from_json(doc).is_err());
        let doc = r#"{"tasks": [{"kind": "passkey", "length": 128, "key_length": 4}],
                      "evolution": {"phases": [{"tasks": ["passkey"], "generations": 3}]}}"#;
        assert!(RunConfig::from_json(doc).is_ok());
        let doc = r#"{"tasks": [{"kind": "passkey", "length": 4000, "key_length": 4}],
                      "evolution": {"phases": [{"tasks": ["passkey"], "generations": 3}]}}"#;
        assert!(RunConfig::from_json(doc).is_err());
        assert!(RunConfig::from_json(r#"{"lm": {"model": {"vocab": 32}}}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.policy.threshold_offset = 0.5;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        let back = RunConfig::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back.hash().unwrap(), a.hash().unwrap());
    }

    #[test]
    fn baselines_by_name() {
        let mut p = PolicySection::default();
        assert!(matches!(p.baseline("full").unwrap(), EvictionPolicy::Full));
        assert!(p.baseline("l2").is_err());
        p.budget = Some(40);
        assert!(matches!(
            p.baseline("h2o").unwrap(),
            EvictionPolicy::H2o {
                budget: 40,
                recent_window: 20
            }
        ));
        assert!(matches!(p.baseline("recency").unwrap(), EvictionPolicy::Recency { budget: 40 }));
        assert!(p.baseline("namm").is_err());
        assert!(p.baseline("lru").is_err());
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut seen = 0;
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "json") {
                RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                seen += 1;
            }
        }
        assert!(seen >= 1);
    }
}
