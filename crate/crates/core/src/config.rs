//! Experiment config files (TOML, schema version 1).
//!
//! ```toml
//! version = 1
//!
//! [train]                 # every key optional
//! objective = "gmpo"      # grpo | gmpo | gmpo_noclip | gmpo_seqclip | gmpo_nonorm
//! group_size = 8
//! prompts_per_round = 128
//! inner_updates = 8
//! epochs_per_round = 1
//! step_size = 1.0
//! momentum = 0.0
//! total_rounds = 40
//! temperature = 1.0
//! seed = 0
//!
//! [clip]                  # optional; defaults depend on the objective
//! mode = "token"          # token | sequence | none
//! lower_log = -0.4        # ln(eps1); may be -inf
//! upper_log = 0.4         # ln(eps2); may be inf
//! # grpo_epsilon = 0.2    # linear (1 - eps, 1 + eps), instead of the bounds
//!
//! [policy]
//! buckets = 4096
//! context_order = 2
//!
//! [task]                  # name required; the rest default per task
//! name = "copy"           # copy | parity
//! alphabet_size = 3
//! min_target_len = 2
//! max_target_len = 3
//! prompt_count = 32
//! max_len = 6
//! seed = 17
//! ```
//!
//! Unknown keys are rejected. The `[clip]` table applies to the objective
//! named in the file; selecting a different objective on the command line
//! falls back to that objective's default thresholds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{TaskConfig, TaskName};
use crate::error::{Error, Result};
use crate::rollout::{ClipConfig, ClipMode, ObjectiveKind};
use crate::trainer::{PolicyConfig, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const RESOLVED_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawTrain {
    objective: Option<ObjectiveKind>,
    group_size: Option<usize>,
    prompts_per_round: Option<usize>,
    inner_updates: Option<usize>,
    epochs_per_round: Option<usize>,
    step_size: Option<f64>,
    momentum: Option<f64>,
    total_rounds: Option<usize>,
    temperature: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawClip {
    mode: Option<ClipMode>,
    lower_log: Option<f64>,
    upper_log: Option<f64>,
    grpo_epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    name: TaskName,
    alphabet_size: Option<usize>,
    min_target_len: Option<usize>,
    max_target_len: Option<usize>,
    prompt_count: Option<usize>,
    max_len: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    version: u32,
    #[serde(default)]
    train: RawTrain,
    clip: Option<RawClip>,
    #[serde(default)]
    policy: PolicyConfig,
    task: RawTask,
}

/// A parsed config file, before command-line overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    raw: RawConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub objective: Option<ObjectiveKind>,
    pub clip_lower: Option<f64>,
    pub clip_upper: Option<f64>,
    pub grpo_epsilon: Option<f64>,
    pub seed: Option<u64>,
}

fn config_err(path: Option<&Path>, msg: impl std::fmt::Display) -> Error {
    match path {
        Some(p) => Error::Config(format!("{}: {msg}", p.display())),
        None => Error::Config(msg.to_string()),
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_named(text, None)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_named(&text, Some(path))
    }

    fn parse_named(text: &str, path: Option<&Path>) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| config_err(path, e))?;
        if raw.version != SCHEMA_VERSION {
            return Err(config_err(
                path,
                format!("unsupported config version {} (expected {SCHEMA_VERSION})", raw.version),
            ));
        }
        let cfg = Self { raw };
        cfg.resolve(&Overrides::default())
            .map_err(|e| config_err(path, e))?;
        Ok(cfg)
    }

    pub fn objective(&self) -> ObjectiveKind {
        self.raw.train.objective.unwrap_or(ObjectiveKind::Gmpo)
    }

    /// Applies `overrides` and produces a validated training config.
    pub fn resolve(&self, overrides: &Overrides) -> Result<TrainConfig> {
        let t = &self.raw.train;
        let file_objective = self.objective();
        let objective = overrides.objective.unwrap_or(file_objective);
        let mut cfg = TrainConfig::new(objective, resolve_task(&self.raw.task)?);
        cfg.group_size = t.group_size.unwrap_or(cfg.group_size);
        cfg.prompts_per_round = t.prompts_per_round.unwrap_or(cfg.prompts_per_round);
        cfg.inner_updates = t.inner_updates.unwrap_or(cfg.inner_updates);
        cfg.epochs_per_round = t.epochs_per_round.unwrap_or(cfg.epochs_per_round);
        cfg.step_size = t.step_size.unwrap_or(cfg.step_size);
        cfg.momentum = t.momentum.unwrap_or(cfg.momentum);
        cfg.total_rounds = t.total_rounds.unwrap_or(cfg.total_rounds);
        cfg.temperature = t.temperature.unwrap_or(cfg.temperature);
        cfg.seed = overrides.seed.or(t.seed).unwrap_or(cfg.seed);
        cfg.policy = self.raw.policy;

        let mut clip = match &self.raw.clip {
            Some(raw) if objective == file_objective => resolve_clip(raw, objective)?,
            _ => objective.default_clip(),
        };
        if let Some(eps) = overrides.grpo_epsilon {
            if objective != ObjectiveKind::Grpo {
                return Err(Error::Config(format!(
                    "--grpo-epsilon only applies to grpo, objective is {objective}"
                )));
            }
            clip = ClipConfig::linear(eps).map_err(|e| Error::Config(e.to_string()))?;
        }
        if overrides.clip_lower.is_some() || overrides.clip_upper.is_some() {
            if clip.mode == ClipMode::None {
                clip.mode = objective.default_clip().mode;
            }
            clip.lower_log = overrides.clip_lower.unwrap_or(clip.lower_log);
            clip.upper_log = overrides.clip_upper.unwrap_or(clip.upper_log);
        }
        cfg.clip = clip;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn resolve_task(raw: &RawTask) -> Result<TaskConfig> {
    let base = match raw.name {
        TaskName::Copy => TaskConfig::copy_default(),
        TaskName::Parity => TaskConfig::parity_default(),
    };
    let cfg = TaskConfig {
        name: raw.name,
        alphabet_size: raw.alphabet_size.unwrap_or(base.alphabet_size),
        min_target_len: raw.min_target_len.unwrap_or(base.min_target_len),
        max_target_len: raw.max_target_len.unwrap_or(base.max_target_len),
        prompt_count: raw.prompt_count.unwrap_or(base.prompt_count),
        max_len: raw.max_len.unwrap_or(base.max_len),
        seed: raw.seed.unwrap_or(base.seed),
    };
    cfg.build().map_err(|e| Error::Config(format!("[task]: {e}")))?;
    Ok(cfg)
}

fn resolve_clip(raw: &RawClip, objective: ObjectiveKind) -> Result<ClipConfig> {
    let base = objective.default_clip();
    let bad = |e: Error| Error::Config(format!("[clip]: {e}"));
    if let Some(eps) = raw.grpo_epsilon {
        if raw.lower_log.is_some() || raw.upper_log.is_some() {
            return Err(Error::Config(
                "[clip]: grpo_epsilon conflicts with lower_log/upper_log".into(),
            ));
        }
        let mut clip = ClipConfig::linear(eps).map_err(bad)?;
        clip.mode = raw.mode.unwrap_or(ClipMode::Token);
        return Ok(clip);
    }
    let mode = raw.mode.unwrap_or(base.mode);
    let (lo, hi) = match (mode, raw.lower_log, raw.upper_log) {
        (ClipMode::None, None, None) => (f64::NEG_INFINITY, f64::INFINITY),
        (_, lo, hi) => (
            lo.unwrap_or(if base.lower_log.is_finite() { base.lower_log } else { -0.4 }),
            hi.unwrap_or(if base.upper_log.is_finite() { base.upper_log } else { 0.4 }),
        ),
    };
    ClipConfig::new(lo, hi, mode).map_err(bad)
}

/// Serializes a resolved config; the output parses back to the same config.
pub fn to_toml(cfg: &TrainConfig) -> Result<String> {
    let t = &cfg.task;
    let raw = RawConfig {
        version: SCHEMA_VERSION,
        train: RawTrain {
            objective: Some(cfg.objective),
            group_size: Some(cfg.group_size),
            prompts_per_round: Some(cfg.prompts_per_round),
            inner_updates: Some(cfg.inner_updates),
            epochs_per_round: Some(cfg.epochs_per_round),
            step_size: Some(cfg.step_size),
            momentum: Some(cfg.momentum),
            total_rounds: Some(cfg.total_rounds),
            temperature: Some(cfg.temperature),
            seed: Some(cfg.seed),
        },
        clip: Some(RawClip {
            mode: Some(cfg.clip.mode),
            lower_log: Some(cfg.clip.lower_log),
            upper_log: Some(cfg.clip.upper_log),
            grpo_epsilon: None,
        }),
        policy: cfg.policy,
        task: RawTask {
            name: t.name,
            alphabet_size: Some(t.alphabet_size),
            min_target_len: Some(t.min_target_len),
            max_target_len: Some(t.max_target_len),
            prompt_count: Some(t.prompt_count),
            max_len: Some(t.max_len),
            seed: Some(t.seed),
        },
    };
    toml::to_string(&raw).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
}

/// Writes `config.resolved.toml` into `dir`.
pub fn write_resolved(cfg: &TrainConfig, dir: &Path) -> Result<()> {
    let path = dir.join(RESOLVED_FILE);
    std::fs::write(&path, to_toml(cfg)?).map_err(|e| Error::io(path, e))
}
