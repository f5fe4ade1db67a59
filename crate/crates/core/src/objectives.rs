//! Per-rollout surrogate objectives and their exact token-level gradient
//! coefficients.
//!
//! Every objective returns `token_scores` `c_t` such that the gradient of the
//! rollout's contribution with respect to any policy parameter is
//! `sum_t c_t * d log pi(o_t) / d theta`. All GMPO variants work on log
//! importance ratios `d_t = log pi_new - log pi_old`; products of ratios are
//! never formed in linear space.
//!
//! Clipping follows the `sgn` construction: in sign-adjusted space
//! `x_t = sgn(A) * d_t` the clipped log ratio is `min(x_t, clamp(x_t, L, U))`,
//! so only the upper threshold ever binds. Large ratios are clipped when the
//! advantage is positive and small ratios when it is negative.

use crate::error::{Error, Result};
use crate::rollout::{check_len, sgn, ClipConfig, ClipMode, ObjectiveKind, Rollout, RolloutGroup};

/// Value and gradient coefficients of one rollout's surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveResult {
    /// Signed per-rollout contribution.
    pub value: f64,
    /// `c_t`; zero for clipped and masked tokens.
    pub token_scores: Vec<f64>,
    pub clipped_flags: Vec<bool>,
    /// Sum over valid tokens of the post-min log ratio.
    pub ratio_log_sum: f64,
}

impl ObjectiveResult {
    pub fn clipped_count(&self) -> usize {
        self.clipped_flags.iter().filter(|&&c| c).count()
    }
}

/// Raw log ratios `new - old`, validated against the rollout.
pub fn log_ratios(new_logps: &[f64], rollout: &Rollout) -> Result<Vec<f64>> {
    check_len("new_logps", rollout.len(), new_logps.len())?;
    if let Some((t, lp)) = new_logps.iter().enumerate().find(|(_, lp)| !lp.is_finite()) {
        return Err(Error::InvalidValue(format!(
            "new log-prob at token {t} is {lp}"
        )));
    }
    Ok(new_logps
        .iter()
        .zip(rollout.old_logps())
        .map(|(new, old)| new - old)
        .collect())
}

fn check_advantage(advantage: f64) -> Result<()> {
    if advantage.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidValue(format!("advantage {advantage} is not finite")))
    }
}

fn require_mode(kind: &'static str, clip: &ClipConfig, allowed: &[ClipMode]) -> Result<()> {
    if allowed.contains(&clip.mode) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{kind} does not support clip mode {}",
            clip.mode
        )))
    }
}

/// `min(x, clamp(x, lower, upper))` without panicking on infinite bounds.
fn pessimistic(x: f64, lower: f64, upper: f64) -> f64 {
    let clamped = x.max(lower).min(upper);
    x.min(clamped)
}

/// Token-level arithmetic-mean objective with linear-space PPO clipping.
pub fn grpo_rollout_objective(
    new_logps: &[f64],
    rollout: &Rollout,
    advantage: f64,
    clip: &ClipConfig,
) -> Result<ObjectiveResult> {
    require_mode("grpo", clip, &[ClipMode::Token, ClipMode::None])?;
    check_advantage(advantage)?;
    let diffs = log_ratios(new_logps, rollout)?;
    let (lower, upper) = clip.bounds();
    let n = rollout.valid_len() as f64;

    let mut value = 0.0;
    let mut ratio_log_sum = 0.0;
    let mut token_scores = vec![0.0; diffs.len()];
    let mut clipped_flags = vec![false; diffs.len()];
    for (t, (&d, &valid)) in diffs.iter().zip(rollout.mask()).enumerate() {
        if !valid {
            continue;
        }
        let ratio = d.exp();
        let unclipped = ratio * advantage;
        let clamped_log = d.max(lower).min(upper);
        let clipped = clamped_log.exp() * advantage;
        if clipped < unclipped {
            clipped_flags[t] = true;
            value += clipped;
            ratio_log_sum += clamped_log;
        } else {
            token_scores[t] = unclipped / n;
            value += unclipped;
            ratio_log_sum += d;
        }
    }
    Ok(ObjectiveResult {
        value: value / n,
        token_scores,
        clipped_flags,
        ratio_log_sum,
    })
}

fn gmpo_token_level(
    new_logps: &[f64],
    rollout: &Rollout,
    advantage: f64,
    clip: &ClipConfig,
    normalize: bool,
) -> Result<ObjectiveResult> {
    check_advantage(advantage)?;
    let diffs = log_ratios(new_logps, rollout)?;
    let sign = sgn(advantage)?;
    let (lower, upper) = clip.bounds();

    let mut ratio_log_sum = 0.0;
    let mut clipped_flags = vec![false; diffs.len()];
    for (t, (&d, &valid)) in diffs.iter().zip(rollout.mask()).enumerate() {
        if !valid {
            continue;
        }
        let x = sign * d;
        clipped_flags[t] = x > upper;
        ratio_log_sum += sign * pessimistic(x, lower, upper);
    }

    let norm = if normalize {
        rollout.valid_len() as f64
    } else {
        1.0
    };
    let value = advantage * (ratio_log_sum / norm).exp();
    let token_scores = clipped_flags
        .iter()
        .zip(rollout.mask())
        .map(|(&clipped, &valid)| {
            if valid && !clipped {
                value / norm
            } else {
                0.0
            }
        })
        .collect();
    Ok(ObjectiveResult {
        value,
        token_scores,
        clipped_flags,
        ratio_log_sum,
    })
}

/// Geometric-mean objective with token-level pessimistic clipping:
/// `A * exp(sum_t m_t / |o|)`.
pub fn gmpo_rollout_objective(
    new_logps: &[f64],
    rollout: &Rollout,
    advantage: f64,
    clip: &ClipConfig,
) -> Result<ObjectiveResult> {
    require_mode("gmpo", clip, &[ClipMode::Token, ClipMode::None])?;
    gmpo_token_level(new_logps, rollout, advantage, clip, true)
}

/// Geometric mean with the sequence ratio clipped as a whole. A clipped
/// sequence contributes no gradient at all.
pub fn gmpo_seqclip_rollout_objective(
    new_logps: &[f64],
    rollout: &Rollout,
    advantage: f64,
    clip: &ClipConfig,
) -> Result<ObjectiveResult> {
    require_mode("gmpo_seqclip", clip, &[ClipMode::Sequence, ClipMode::None])?;
    check_advantage(advantage)?;
    let diffs = log_ratios(new_logps, rollout)?;
    let sign = sgn(advantage)?;
    let (lower, upper) = clip.bounds();

    let seq_log: f64 = diffs
        .iter()
        .zip(rollout.mask())
        .filter(|(_, &valid)| valid)
        .map(|(d, _)| d)
        .sum();
    let x = sign * seq_log;
    let clipped = x > upper;
    let m = sign * pessimistic(x, lower, upper);
    let n = rollout.valid_len() as f64;
    let value = advantage * (m / n).exp();

    let token_scores = rollout
        .mask()
        .iter()
        .map(|&valid| if valid && !clipped { value / n } else { 0.0 })
        .collect();
    let clipped_flags = rollout.mask().iter().map(|&valid| valid && clipped).collect();
    Ok(ObjectiveResult {
        value,
        token_scores,
        clipped_flags,
        ratio_log_sum: m,
    })
}

/// Token-clipped product of ratios without the `1/|o|` root.
pub fn gmpo_nonorm_rollout_objective(
    new_logps: &[f64],
    rollout: &Rollout,
    advantage: f64,
    clip: &ClipConfig,
) -> Result<ObjectiveResult> {
    require_mode("gmpo_nonorm", clip, &[ClipMode::Token, ClipMode::None])?;
    gmpo_token_level(new_logps, rollout, advantage, clip, false)
}

impl ObjectiveKind {
    /// Evaluates this objective on one rollout. `GmpoNoClip` ignores `clip`.
    pub fn evaluate(
        self,
        new_logps: &[f64],
        rollout: &Rollout,
        advantage: f64,
        clip: &ClipConfig,
    ) -> Result<ObjectiveResult> {
        match self {
            ObjectiveKind::Grpo => grpo_rollout_objective(new_logps, rollout, advantage, clip),
            ObjectiveKind::GmpoNoClip => {
                gmpo_rollout_objective(new_logps, rollout, advantage, &ClipConfig::none())
            }
            ObjectiveKind::GmpoSeqClip => {
                gmpo_seqclip_rollout_objective(new_logps, rollout, advantage, clip)
            }
            ObjectiveKind::GmpoNoNorm => {
                gmpo_nonorm_rollout_objective(new_logps, rollout, advantage, clip)
            }
            ObjectiveKind::Gmpo => gmpo_rollout_objective(new_logps, rollout, advantage, clip),
        }
    }
}

/// A rollout paired with its group-normalized advantage.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub rollout: &'a Rollout,
    pub advantage: f64,
}

/// Batch value plus the per-rollout results it was reduced from.
#[derive(Debug, Clone)]
pub struct BatchEvaluation {
    pub value: f64,
    pub results: Vec<ObjectiveResult>,
}

/// Mean per-rollout objective over a minibatch, reduced in input order.
pub fn evaluate_batch(
    samples: &[Sample<'_>],
    new_logps: &[Vec<f64>],
    kind: ObjectiveKind,
    clip: &ClipConfig,
) -> Result<BatchEvaluation> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    check_len("batch new_logps", samples.len(), new_logps.len())?;
    let results = samples
        .iter()
        .zip(new_logps)
        .map(|(s, lp)| kind.evaluate(lp, s.rollout, s.advantage, clip))
        .collect::<Result<Vec<_>>>()?;
    let value = results.iter().map(|r| r.value).sum::<f64>() / results.len() as f64;
    Ok(BatchEvaluation { value, results })
}

/// Mean objective over every rollout of `groups`; `new_logps` lists one
/// entry per rollout in group order.
pub fn batch_objective(
    groups: &[RolloutGroup],
    new_logps: &[Vec<f64>],
    kind: ObjectiveKind,
    clip: &ClipConfig,
) -> Result<f64> {
    let samples: Vec<Sample<'_>> = groups
        .iter()
        .flat_map(|g| {
            g.rollouts()
                .iter()
                .zip(g.advantages())
                .map(|(rollout, &advantage)| Sample { rollout, advantage })
        })
        .collect();
    Ok(evaluate_batch(&samples, new_logps, kind, clip)?.value)
}

/// Per-token gradient weights of the two objectives, up to the shared
/// `A/|o|` factor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientWeights {
    /// Each token weighted by its own ratio.
    pub grpo: Vec<f64>,
    /// Geometric mean of all ratios, shared by every token.
    pub gmpo: f64,
}

pub fn gradient_weight_comparison(ratios: &[f64]) -> Result<GradientWeights> {
    if ratios.is_empty() {
        return Err(Error::InvalidArgument("no ratios".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
        return Err(Error::InvalidValue(format!("ratio {r} is not positive")));
    }
    let mean_log = ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64;
    Ok(GradientWeights {
        grpo: ratios.to_vec(),
        gmpo: mean_log.exp(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::PromptId;

    const TOL: f64 = 1e-12;

    /// Rollout whose old log-probs are `-1` everywhere, so `new = d - 1`.
    fn fixture(diffs: &[f64]) -> (Rollout, Vec<f64>) {
        let old = vec![-1.0; diffs.len()];
        let rollout = Rollout::new(PromptId(0), vec![0; diffs.len()], old).unwrap();
        let new = diffs.iter().map(|d| d - 1.0).collect();
        (rollout, new)
    }

    fn ratios(rs: &[f64]) -> Vec<f64> {
        rs.iter().map(|r| r.ln()).collect()
    }

    #[test]
    fn grpo_identity_ratios() {
        let (r, new) = fixture(&[0.0, 0.0]);
        let res = grpo_rollout_objective(&new, &r, 1.0, &ClipConfig::linear(0.2).unwrap()).unwrap();
        assert!((res.value - 1.0).abs() < TOL);
        assert_eq!(res.token_scores, vec![0.5, 0.5]);
        assert_eq!(res.clipped_count(), 0);
    }

    #[test]
    fn grpo_positive_advantage_clips_large_ratio() {
        let (r, new) = fixture(&ratios(&[0.5, 1.5]));
        let res = grpo_rollout_objective(&new, &r, 1.0, &ClipConfig::linear(0.2).unwrap()).unwrap();
        assert!((res.value - 0.85).abs() < TOL, "{}", res.value);
        assert_eq!(res.clipped_flags, vec![false, true]);
        assert!((res.token_scores[0] - 0.25).abs() < TOL);
        assert_eq!(res.token_scores[1], 0.0);
    }

    #[test]
    fn grpo_negative_advantage_clips_small_ratio() {
        let (r, new) = fixture(&ratios(&[0.5, 1.5]));
        let res = grpo_rollout_objective(&new, &r, -1.0, &ClipConfig::linear(0.2).unwrap()).unwrap();
        assert!((res.value + 1.15).abs() < TOL, "{}", res.value);
        assert_eq!(res.clipped_flags, vec![true, false]);
        assert_eq!(res.token_scores[0], 0.0);
        assert!((res.token_scores[1] + 0.75).abs() < TOL);
    }

    #[test]
    fn gmpo_identity_ratios() {
        let (r, new) = fixture(&[0.0, 0.0, 0.0]);
        let res = gmpo_rollout_objective(&new, &r, 2.0, &ClipConfig::symmetric_log(0.4)).unwrap();
        assert_eq!(res.value, 2.0);
        assert_eq!(res.clipped_count(), 0);
    }

    #[test]
    fn gmpo_geometric_mean_of_reciprocal_ratios() {
        let (r, new) = fixture(&[0.2, -0.2]);
        let res = gmpo_rollout_objective(&new, &r, 1.0, &ClipConfig::none()).unwrap();
        assert!((res.value - 1.0).abs() < TOL);
        assert!((res.token_scores[0] - 0.5).abs() < TOL);
    }

    #[test]
    fn gmpo_clamps_large_ratio_for_positive_advantage() {
        let (r, new) = fixture(&[0.6]);
        let clip = ClipConfig::symmetric_log(0.4);
        let res = gmpo_rollout_objective(&new, &r, 1.0, &clip).unwrap();
        assert!((res.value - 1.491_824_697_641_270_3).abs() < 1e-12);
        assert_eq!(res.clipped_flags, vec![true]);
        assert_eq!(res.token_scores, vec![0.0]);
    }

    #[test]
    fn gmpo_clamps_small_ratio_for_negative_advantage() {
        let (r, new) = fixture(&[-0.6]);
        let clip = ClipConfig::symmetric_log(0.4);
        let res = gmpo_rollout_objective(&new, &r, -1.0, &clip).unwrap();
        assert!((res.value + 0.670_320_046_035_639_3).abs() < 1e-12);
        assert_eq!(res.clipped_flags, vec![true]);
    }

    #[test]
    fn gmpo_lower_threshold_never_binds() {
        // Below L in sgn-space the outer min keeps the raw value.
        let (r, new) = fixture(&[-0.9]);
        let clip = ClipConfig::symmetric_log(0.4);
        let res = gmpo_rollout_objective(&new, &r, 1.0, &clip).unwrap();
        assert!((res.value - (-0.9f64).exp()).abs() < TOL);
        assert_eq!(res.clipped_count(), 0);
        assert!(res.token_scores[0] > 0.0);
    }

    #[test]
    fn seqclip_whole_sequence() {
        let clip = ClipConfig::sequence(-0.4, 0.4).unwrap();
        let (r, new) = fixture(&[0.3, 0.3]);
        let res = gmpo_seqclip_rollout_objective(&new, &r, 1.0, &clip).unwrap();
        assert!((res.value - 0.2f64.exp()).abs() < TOL);
        assert!((res.value - 1.221_402_758_160_17).abs() < 1e-12);
        assert_eq!(res.token_scores, vec![0.0, 0.0]);
        assert_eq!(res.clipped_flags, vec![true, true]);

        let (r, new) = fixture(&[0.1, 0.1]);
        let res = gmpo_seqclip_rollout_objective(&new, &r, 1.0, &clip).unwrap();
        assert!((res.value - 1.105_170_918_075_647_7).abs() < 1e-12);
        assert!((res.token_scores[0] - res.value / 2.0).abs() < TOL);

        let (r, new) = fixture(&[0.0, 0.0]);
        for adv in [1.5, -0.7] {
            let res = gmpo_seqclip_rollout_objective(&new, &r, adv, &clip).unwrap();
            assert_eq!(res.value, adv);
            assert_eq!(res.clipped_count(), 0);
        }
    }

    #[test]
    fn nonorm_drops_root() {
        let (r, new) = fixture(&[0.1, 0.1]);
        let res = gmpo_nonorm_rollout_objective(&new, &r, 1.0, &ClipConfig::none()).unwrap();
        assert!((res.value - 1.221_402_758_160_17).abs() < 1e-12);
        assert!((res.token_scores[0] - res.value).abs() < TOL);

        let (r, new) = fixture(&[0.0, 0.0]);
        let res = gmpo_nonorm_rollout_objective(&new, &r, -2.0, &ClipConfig::none()).unwrap();
        assert_eq!(res.value, -2.0);

        let (r, new) = fixture(&[0.3, 0.3]);
        let res =
            gmpo_nonorm_rollout_objective(&new, &r, 1.0, &ClipConfig::symmetric_log(0.4)).unwrap();
        assert!((res.value - 1.822_118_800_390_508_7).abs() < 1e-12);
        assert_eq!(res.clipped_count(), 0);
    }

    #[test]
    fn masked_tokens_are_excluded() {
        let rollout = Rollout::with_mask(
            PromptId(0),
            vec![0, 1, 2],
            vec![-1.0, -1.0, -1.0],
            vec![true, false, true],
        )
        .unwrap();
        let new = vec![-0.8, 5.0, -1.2];
        let res = gmpo_rollout_objective(&new, &rollout, 1.0, &ClipConfig::none()).unwrap();
        assert!((res.value - 1.0).abs() < TOL);
        assert_eq!(res.token_scores[1], 0.0);
        assert!((res.token_scores[0] - 0.5).abs() < TOL);
        let res = grpo_rollout_objective(&new, &rollout, 1.0, &ClipConfig::none()).unwrap();
        let expect = (0.2f64.exp() + (-0.2f64).exp()) / 2.0;
        assert!((res.value - expect).abs() < TOL);
    }

    #[test]
    fn error_paths() {
        let (r, new) = fixture(&[0.0, 0.0]);
        let clip = ClipConfig::symmetric_log(0.4);
        assert!(matches!(
            gmpo_rollout_objective(&new[..1], &r, 1.0, &clip),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            grpo_rollout_objective(&[f64::NAN, 0.0], &r, 1.0, &clip),
            Err(Error::InvalidValue(_))
        ));
        assert!(gmpo_rollout_objective(&new, &r, f64::NAN, &clip).is_err());
        let seq = ClipConfig::sequence(-0.4, 0.4).unwrap();
        assert!(gmpo_rollout_objective(&new, &r, 1.0, &seq).is_err());
        assert!(gmpo_seqclip_rollout_objective(&new, &r, 1.0, &clip).is_err());
    }

    #[test]
    fn batch_reductions() {
        let (r, new) = fixture(&[0.0]);
        let samples = [
            Sample { rollout: &r, advantage: 1.0 },
            Sample { rollout: &r, advantage: -1.0 },
        ];
        let lps = vec![new.clone(), new.clone()];
        let clip = ClipConfig::symmetric_log(0.4);
        let v = evaluate_batch(&samples, &lps, ObjectiveKind::Gmpo, &clip).unwrap();
        assert_eq!(v.value, 0.0);

        let one = evaluate_batch(&samples[..1], &lps[..1], ObjectiveKind::Gmpo, &clip).unwrap();
        assert_eq!(one.value, 1.0);

        let samples = [
            Sample { rollout: &r, advantage: 1.2 },
            Sample { rollout: &r, advantage: 0.8 },
        ];
        let v = evaluate_batch(&samples, &lps, ObjectiveKind::Gmpo, &clip).unwrap();
        assert!((v.value - 1.0).abs() < TOL);

        assert!(matches!(
            evaluate_batch(&[], &[], ObjectiveKind::Gmpo, &clip),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn batch_over_groups() {
        let (r, new) = fixture(&[0.0, 0.0]);
        let group = RolloutGroup::new(vec![r.clone(), r], vec![1.0, 0.0]).unwrap();
        let v = batch_objective(
            &[group],
            &[new.clone(), new],
            ObjectiveKind::Grpo,
            &ClipConfig::linear(0.2).unwrap(),
        )
        .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn gradient_weights() {
        let w = gradient_weight_comparison(&[10.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(w.grpo, vec![10.0, 1.0, 1.0, 1.0]);
        assert!((w.gmpo - 1.778_279_410_038_922_8).abs() < 1e-12);
        let w = gradient_weight_comparison(&[1.0; 5]).unwrap();
        assert_eq!(w.gmpo, 1.0);
        let w = gradient_weight_comparison(&[4.0, 1.0]).unwrap();
        assert!((w.gmpo - 2.0).abs() < 1e-15);
        assert!(gradient_weight_comparison(&[1.0, 0.0]).is_err());
        assert!(gradient_weight_comparison(&[-1.0]).is_err());
    }
}
