//! Shared domain types: rollouts, groups, clipping configuration and the
//! objective enumeration, plus group-relative advantage normalization.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vocabulary index.
pub type Token = usize;

/// Opaque prompt identifier. Prompts condition the policy only through
/// context hashing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PromptId(pub u64);

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{}", self.0)
    }
}

/// Guard against division by a vanishing group standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// One sampled response with the old-policy log-probabilities of its tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    prompt: PromptId,
    tokens: Vec<Token>,
    old_logps: Vec<f64>,
    mask: Vec<bool>,
}

impl Rollout {
    /// Builds a rollout where every token is valid.
    pub fn new(prompt: PromptId, tokens: Vec<Token>, old_logps: Vec<f64>) -> Result<Self> {
        let mask = vec![true; tokens.len()];
        Self::with_mask(prompt, tokens, old_logps, mask)
    }

    pub fn with_mask(
        prompt: PromptId,
        tokens: Vec<Token>,
        old_logps: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("rollout has no tokens".into()));
        }
        check_len("rollout old_logps", tokens.len(), old_logps.len())?;
        check_len("rollout mask", tokens.len(), mask.len())?;
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument(
                "rollout mask has no valid token".into(),
            ));
        }
        if let Some((t, lp)) = old_logps
            .iter()
            .enumerate()
            .find(|(_, lp)| !lp.is_finite() || **lp > 0.0)
        {
            return Err(Error::InvalidValue(format!(
                "old log-prob at token {t} is {lp}; must be finite and <= 0"
            )));
        }
        Ok(Self {
            prompt,
            tokens,
            old_logps,
            mask,
        })
    }

    pub fn prompt(&self) -> PromptId {
        self.prompt
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn old_logps(&self) -> &[f64] {
        &self.old_logps
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of tokens with a true mask flag.
    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            expected,
            actual,
        })
    }
}

/// The G rollouts sampled for one prompt, their binary rewards and their
/// normalized advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    rollouts: Vec<Rollout>,
    rewards: Vec<f64>,
    advantages: Vec<f64>,
}

impl RolloutGroup {
    /// Validates the group and fills advantages with [`normalize_group`].
    pub fn new(rollouts: Vec<Rollout>, rewards: Vec<f64>) -> Result<Self> {
        if rollouts.len() < 2 {
            return Err(Error::InvalidGroup(format!(
                "group needs at least 2 rollouts, got {}",
                rollouts.len()
            )));
        }
        check_len("group rewards", rollouts.len(), rewards.len())?;
        let prompt = rollouts[0].prompt();
        if let Some(r) = rollouts.iter().find(|r| r.prompt() != prompt) {
            return Err(Error::InvalidGroup(format!(
                "mixed prompts {} and {}",
                prompt,
                r.prompt()
            )));
        }
        if let Some(r) = rewards.iter().find(|&&r| r != 0.0 && r != 1.0) {
            return Err(Error::InvalidGroup(format!("reward {r} is not binary")));
        }
        let advantages = normalize_group(&rewards)?;
        Ok(Self {
            rollouts,
            rewards,
            advantages,
        })
    }

    pub fn prompt(&self) -> PromptId {
        self.rollouts[0].prompt()
    }

    pub fn rollouts(&self) -> &[Rollout] {
        &self.rollouts
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn advantages(&self) -> &[f64] {
        &self.advantages
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }
}

/// Group-relative advantages `(r - mean) / max(std, 1e-8)` with the
/// population standard deviation. A zero-variance group maps to all zeros.
pub fn normalize_group(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidGroup(format!(
            "normalization needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::InvalidValue(format!("reward {r} is not finite")));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Sign of an advantage: `+1` when strictly positive, `-1` otherwise
/// (zero included).
pub fn sgn(advantage: f64) -> Result<f64> {
    if !advantage.is_finite() {
        return Err(Error::InvalidValue(format!(
            "advantage {advantage} is not finite"
        )));
    }
    Ok(if advantage > 0.0 { 1.0 } else { -1.0 })
}

/// Granularity at which the importance ratio is clipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipMode {
    Token,
    Sequence,
    None,
}

impl fmt::Display for ClipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClipMode::Token => "token",
            ClipMode::Sequence => "sequence",
            ClipMode::None => "none",
        })
    }
}

impl FromStr for ClipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "token" => Ok(ClipMode::Token),
            "sequence" | "seq" => Ok(ClipMode::Sequence),
            "none" => Ok(ClipMode::None),
            other => Err(Error::Config(format!(
                "unknown clip mode {other:?} (expected token, sequence or none)"
            ))),
        }
    }
}

/// Log-space clipping thresholds `(L, U) = (ln eps1, ln eps2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub lower_log: f64,
    pub upper_log: f64,
    pub mode: ClipMode,
}

impl ClipConfig {
    pub fn new(lower_log: f64, upper_log: f64, mode: ClipMode) -> Result<Self> {
        if lower_log.is_nan() || upper_log.is_nan() || lower_log > 0.0 || upper_log < 0.0 {
            return Err(Error::InvalidValue(format!(
                "clip thresholds must satisfy L <= 0 <= U, got L={lower_log}, U={upper_log}"
            )));
        }
        Ok(Self {
            lower_log,
            upper_log,
            mode,
        })
    }

    /// `(e^-eps, e^eps)` at token level; `eps = 0.4` is the GMPO default.
    pub fn symmetric_log(eps: f64) -> Self {
        Self {
            lower_log: -eps,
            upper_log: eps,
            mode: ClipMode::Token,
        }
    }

    /// Linear-space PPO range `(1 - eps, 1 + eps)` at token level.
    pub fn linear(eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::InvalidValue(format!(
                "linear clip epsilon must lie in [0, 1), got {eps}"
            )));
        }
        Self::new((1.0 - eps).ln(), (1.0 + eps).ln(), ClipMode::Token)
    }

    pub fn sequence(lower_log: f64, upper_log: f64) -> Result<Self> {
        Self::new(lower_log, upper_log, ClipMode::Sequence)
    }

    pub fn none() -> Self {
        Self {
            lower_log: f64::NEG_INFINITY,
            upper_log: f64::INFINITY,
            mode: ClipMode::None,
        }
    }

    /// Thresholds in effect; `mode = none` always means unbounded.
    pub(crate) fn bounds(&self) -> (f64, f64) {
        match self.mode {
            ClipMode::None => (f64::NEG_INFINITY, f64::INFINITY),
            _ => (self.lower_log, self.upper_log),
        }
    }
}

/// The five training objectives compared in the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectiveKind {
    /// Row 1: token-level arithmetic mean with PPO clipping.
    #[serde(rename = "grpo")]
    Grpo,
    /// Row 2: geometric mean without clipping.
    #[serde(rename = "gmpo_noclip")]
    GmpoNoClip,
    /// Row 3: geometric mean with sequence-level clipping.
    #[serde(rename = "gmpo_seqclip")]
    GmpoSeqClip,
    /// Row 4: token-level clipping, no `1/|o|` normalization.
    #[serde(rename = "gmpo_nonorm")]
    GmpoNoNorm,
    /// Row 5: the full GMPO objective.
    #[serde(rename = "gmpo")]
    Gmpo,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 5] = [
        ObjectiveKind::Grpo,
        ObjectiveKind::GmpoNoClip,
        ObjectiveKind::GmpoSeqClip,
        ObjectiveKind::GmpoNoNorm,
        ObjectiveKind::Gmpo,
    ];

    /// Row of the ablation table this objective reproduces.
    pub fn table_row(self) -> usize {
        match self {
            ObjectiveKind::Grpo => 1,
            ObjectiveKind::GmpoNoClip => 2,
            ObjectiveKind::GmpoSeqClip => 3,
            ObjectiveKind::GmpoNoNorm => 4,
            ObjectiveKind::Gmpo => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Grpo => "grpo",
            ObjectiveKind::GmpoNoClip => "gmpo_noclip",
            ObjectiveKind::GmpoSeqClip => "gmpo_seqclip",
            ObjectiveKind::GmpoNoNorm => "gmpo_nonorm",
            ObjectiveKind::Gmpo => "gmpo",
        }
    }

    /// Default clipping: `(0.8, 1.2)` for GRPO, `(e^-0.4, e^0.4)` for the
    /// GMPO family.
    pub fn default_clip(self) -> ClipConfig {
        match self {
            ObjectiveKind::Grpo => ClipConfig::linear(0.2).expect("0.2 is a valid epsilon"),
            ObjectiveKind::GmpoNoClip => ClipConfig::none(),
            ObjectiveKind::GmpoSeqClip => ClipConfig {
                lower_log: -0.4,
                upper_log: 0.4,
                mode: ClipMode::Sequence,
            },
            ObjectiveKind::GmpoNoNorm | ObjectiveKind::Gmpo => ClipConfig::symmetric_log(0.4),
        }
    }

    /// Whether `mode` is meaningful for this objective.
    pub fn accepts_mode(self, mode: ClipMode) -> bool {
        match self {
            ObjectiveKind::GmpoNoClip => mode == ClipMode::None,
            ObjectiveKind::GmpoSeqClip => mode != ClipMode::Token,
            _ => mode != ClipMode::Sequence,
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown objective {s:?} (expected one of grpo, gmpo, gmpo_noclip, gmpo_seqclip, gmpo_nonorm)"
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn two_member_group() {
        assert_close(&normalize_group(&[1.0, 0.0]).unwrap(), &[1.0, -1.0]);
    }

    #[test]
    fn zero_variance_group_is_exactly_zero() {
        let adv = normalize_group(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(adv.iter().all(|&a| a == 0.0));
        let adv = normalize_group(&[0.3, 0.3, 0.3]).unwrap();
        assert!(adv.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn balanced_group() {
        assert_close(
            &normalize_group(&[1.0, 1.0, 0.0, 0.0]).unwrap(),
            &[1.0, 1.0, -1.0, -1.0],
        );
    }

    #[test]
    fn too_small_group_is_rejected() {
        assert!(matches!(
            normalize_group(&[1.0]),
            Err(Error::InvalidGroup(_))
        ));
        assert!(normalize_group(&[]).is_err());
    }

    #[test]
    fn sign_convention() {
        assert_eq!(sgn(2.3).unwrap(), 1.0);
        assert_eq!(sgn(-0.1).unwrap(), -1.0);
        assert_eq!(sgn(0.0).unwrap(), -1.0);
        assert!(matches!(sgn(f64::NAN), Err(Error::InvalidValue(_))));
        assert!(sgn(f64::INFINITY).is_err());
    }

    #[test]
    fn rollout_invariants() {
        let p = PromptId(1);
        assert!(Rollout::new(p, vec![], vec![]).is_err());
        assert!(matches!(
            Rollout::new(p, vec![1, 2], vec![-0.1]),
            Err(Error::Shape { .. })
        ));
        assert!(Rollout::new(p, vec![1], vec![0.5]).is_err());
        assert!(Rollout::new(p, vec![1], vec![f64::NEG_INFINITY]).is_err());
        assert!(Rollout::with_mask(p, vec![1], vec![-0.1], vec![false]).is_err());
        let r = Rollout::with_mask(p, vec![1, 2], vec![-0.1, 0.0], vec![true, false]).unwrap();
        assert_eq!(r.valid_len(), 1);
    }

    #[test]
    fn group_invariants() {
        let r = |p| Rollout::new(PromptId(p), vec![0], vec![-0.5]).unwrap();
        assert!(RolloutGroup::new(vec![r(1)], vec![1.0]).is_err());
        assert!(RolloutGroup::new(vec![r(1), r(2)], vec![1.0, 0.0]).is_err());
        assert!(RolloutGroup::new(vec![r(1), r(1)], vec![1.0, 0.5]).is_err());
        let g = RolloutGroup::new(vec![r(1), r(1)], vec![1.0, 0.0]).unwrap();
        assert_close(g.advantages(), &[1.0, -1.0]);
    }

    #[test]
    fn clip_config_domain() {
        assert!(ClipConfig::new(0.1, 0.4, ClipMode::Token).is_err());
        assert!(ClipConfig::new(-0.4, -0.1, ClipMode::Token).is_err());
        assert!(ClipConfig::new(f64::NEG_INFINITY, f64::INFINITY, ClipMode::Token).is_ok());
        let grpo = ClipConfig::linear(0.2).unwrap();
        assert!((grpo.lower_log.exp() - 0.8).abs() < 1e-15);
        assert!((grpo.upper_log.exp() - 1.2).abs() < 1e-15);
    }

    #[test]
    fn objective_kinds_map_to_table_rows() {
        let rows: Vec<_> = ObjectiveKind::ALL.iter().map(|k| k.table_row()).collect();
        assert_eq!(rows, vec![1, 2, 3, 4, 5]);
        for k in ObjectiveKind::ALL {
            assert_eq!(k.name().parse::<ObjectiveKind>().unwrap(), k);
            assert!(k.accepts_mode(k.default_clip().mode));
        }
        assert_eq!("GMPO".parse::<ObjectiveKind>().unwrap(), ObjectiveKind::Gmpo);
        assert!("ppo".parse::<ObjectiveKind>().is_err());
    }
}
