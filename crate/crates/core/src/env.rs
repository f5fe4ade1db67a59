//! Synthetic token tasks with verifiable binary rewards.
//!
//! * **Copy**: each prompt owns a target sequence over a small alphabet;
//!   the reward is 1 iff the response reproduces it exactly, then stops.
//! * **Parity**: each prompt owns a length `n` and a parity bit; the reward
//!   is 1 iff the response is exactly `n` bits whose count of ones has that
//!   parity.
//!
//! The end-of-sequence token is the last vocabulary index. Responses
//! truncated at `max_len` are verified as emitted; since `max_len` always
//! exceeds the longest target they earn nothing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::rollout::{PromptId, Token};

/// Largest outcome space enumerated exactly by [`expected_uniform_reward`].
pub const EXACT_ENUMERATION_LIMIT: u64 = 1_000_000;
const MONTE_CARLO_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskName {
    Copy,
    Parity,
}

/// Task block of the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub name: TaskName,
    /// Content alphabet size (excluding EOS). Parity always uses 2.
    pub alphabet_size: usize,
    pub min_target_len: usize,
    pub max_target_len: usize,
    pub prompt_count: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl TaskConfig {
    pub fn copy_default() -> Self {
        Self {
            name: TaskName::Copy,
            alphabet_size: 3,
            min_target_len: 2,
            max_target_len: 3,
            prompt_count: 32,
            max_len: 6,
            seed: 17,
        }
    }

    pub fn parity_default() -> Self {
        Self {
            name: TaskName::Parity,
            alphabet_size: 2,
            min_target_len: 2,
            max_target_len: 4,
            prompt_count: 32,
            max_len: 6,
            seed: 17,
        }
    }

    pub fn build(&self) -> Result<Task> {
        Task::new(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParitySpec {
    /// 0 = even number of ones, 1 = odd.
    pub parity: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Targets {
    Copy(Vec<Vec<Token>>),
    Parity(Vec<ParitySpec>),
}

/// An immutable task instance: prompt set, target specifications, limits.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    name: TaskName,
    alphabet: usize,
    max_len: usize,
    prompts: Vec<PromptId>,
    targets: Targets,
}

impl Task {
    pub fn new(cfg: &TaskConfig) -> Result<Self> {
        if cfg.prompt_count == 0 {
            return Err(Error::Config("task.prompt_count must be at least 1".into()));
        }
        if cfg.min_target_len == 0 || cfg.min_target_len > cfg.max_target_len {
            return Err(Error::Config(format!(
                "task target length range [{}, {}] must satisfy 1 <= min <= max",
                cfg.min_target_len, cfg.max_target_len
            )));
        }
        if cfg.max_len <= cfg.max_target_len {
            return Err(Error::Config(format!(
                "task.max_len ({}) must exceed max_target_len ({}) to leave room for EOS",
                cfg.max_len, cfg.max_target_len
            )));
        }
        let alphabet = match cfg.name {
            TaskName::Copy if cfg.alphabet_size < 2 => {
                return Err(Error::Config("copy task needs alphabet_size >= 2".into()))
            }
            TaskName::Copy => cfg.alphabet_size,
            TaskName::Parity if cfg.alphabet_size != 2 => {
                return Err(Error::Config("parity task uses alphabet_size = 2".into()))
            }
            TaskName::Parity => 2,
        };
        let prompts: Vec<PromptId> = (0..cfg.prompt_count as u64).map(PromptId).collect();
        let targets = match cfg.name {
            TaskName::Copy => Targets::Copy(
                prompts
                    .iter()
                    .map(|p| {
                        let mut r = rng::stream(cfg.seed, &[tag::TASK, p.0]);
                        let len = r.random_range(cfg.min_target_len..=cfg.max_target_len);
                        (0..len).map(|_| r.random_range(0..alphabet)).collect()
                    })
                    .collect(),
            ),
            TaskName::Parity => Targets::Parity(
                prompts
                    .iter()
                    .map(|p| {
                        let mut r = rng::stream(cfg.seed, &[tag::TASK, p.0]);
                        let len = r.random_range(cfg.min_target_len..=cfg.max_target_len);
                        ParitySpec {
                            parity: r.random_range(0..2),
                            len,
                        }
                    })
                    .collect(),
            ),
        };
        Ok(Self {
            name: cfg.name,
            alphabet,
            max_len: cfg.max_len,
            prompts,
            targets,
        })
    }

    pub fn name(&self) -> TaskName {
        self.name
    }

    /// Vocabulary size including EOS.
    pub fn vocab_size(&self) -> usize {
        self.alphabet + 1
    }

    pub fn eos(&self) -> Token {
        self.alphabet
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn prompts(&self) -> &[PromptId] {
        &self.prompts
    }

    fn index(&self, prompt: PromptId) -> Option<usize> {
        let i = prompt.0 as usize;
        (i < self.prompts.len()).then_some(i)
    }

    pub fn copy_target(&self, prompt: PromptId) -> Option<&[Token]> {
        match (&self.targets, self.index(prompt)) {
            (Targets::Copy(t), Some(i)) => Some(&t[i]),
            _ => None,
        }
    }

    pub fn parity_spec(&self, prompt: PromptId) -> Option<ParitySpec> {
        match (&self.targets, self.index(prompt)) {
            (Targets::Parity(s), Some(i)) => Some(s[i]),
            _ => None,
        }
    }

    /// Number of content tokens a rewarding response has.
    pub fn target_len(&self, prompt: PromptId) -> Option<usize> {
        self.copy_target(prompt)
            .map(<[Token]>::len)
            .or_else(|| self.parity_spec(prompt).map(|s| s.len))
    }

    /// Binary reward; unknown prompts earn 0.
    pub fn verify(&self, prompt: PromptId, tokens: &[Token]) -> f64 {
        match (&self.targets, self.index(prompt)) {
            (Targets::Copy(t), Some(i)) => verify_copy(&t[i], self.eos(), tokens),
            (Targets::Parity(s), Some(i)) => verify_parity(s[i], self.eos(), tokens),
            _ => 0.0,
        }
    }

    /// A rewarding response (content followed by EOS).
    pub fn reference_output(&self, prompt: PromptId) -> Option<Vec<Token>> {
        let mut out = match (&self.targets, self.index(prompt)?) {
            (Targets::Copy(t), i) => t[i].clone(),
            (Targets::Parity(s), i) => {
                let mut bits = vec![0; s[i].len];
                bits[0] = s[i].parity;
                bits
            }
        };
        out.push(self.eos());
        Some(out)
    }
}

/// Tokens emitted before the first EOS (all of them if truncated).
fn emitted(eos: Token, tokens: &[Token]) -> &[Token] {
    let end = tokens.iter().position(|&t| t == eos).unwrap_or(tokens.len());
    &tokens[..end]
}

pub fn verify_copy(target: &[Token], eos: Token, tokens: &[Token]) -> f64 {
    if emitted(eos, tokens) == target {
        1.0
    } else {
        0.0
    }
}

pub fn verify_parity(spec: ParitySpec, eos: Token, tokens: &[Token]) -> f64 {
    let bits = emitted(eos, tokens);
    let ok = bits.len() == spec.len
        && bits.iter().all(|&b| b < 2)
        && bits.iter().filter(|&&b| b == 1).count() % 2 == spec.parity;
    if ok {
        1.0
    } else {
        0.0
    }
}

/// Success probability of uniformly random responses of the prompt's target
/// length (EOS placed correctly).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UniformReward {
    pub mean: f64,
    /// Zero when computed by exact enumeration.
    pub std_error: f64,
    pub exact: bool,
}

pub fn expected_uniform_reward(task: &Task, prompt: PromptId) -> Result<UniformReward> {
    let len = task
        .target_len(prompt)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown prompt {prompt}")))?;
    let alphabet = task.alphabet();
    let outcomes = (alphabet as u64).checked_pow(len as u32);
    let mut buf = vec![0; len + 1];
    buf[len] = task.eos();

    match outcomes {
        Some(total) if total <= EXACT_ENUMERATION_LIMIT => {
            let mut hits = 0u64;
            for code in 0..total {
                let mut c = code;
                for slot in buf[..len].iter_mut() {
                    *slot = (c % alphabet as u64) as usize;
                    c /= alphabet as u64;
                }
                if task.verify(prompt, &buf) == 1.0 {
                    hits += 1;
                }
            }
            Ok(UniformReward {
                mean: hits as f64 / total as f64,
                std_error: 0.0,
                exact: true,
            })
        }
        _ => {
            let mut r = rng::stream(prompt.0, &[tag::TASK, len as u64]);
            let mut hits = 0usize;
            for _ in 0..MONTE_CARLO_SAMPLES {
                for slot in buf[..len].iter_mut() {
                    *slot = r.random_range(0..alphabet);
                }
                if task.verify(prompt, &buf) == 1.0 {
                    hits += 1;
                }
            }
            let n = MONTE_CARLO_SAMPLES as f64;
            let mean = hits as f64 / n;
            Ok(UniformReward {
                mean,
                std_error: (mean * (1.0 - mean) / n).sqrt(),
                exact: false,
            })
        }
    }
}
