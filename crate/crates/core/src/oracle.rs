//! Brute-force reference checks.
//!
//! Nothing here calls into [`crate::objectives`] to compute a reference
//! value. The linear-space objective multiplies probability ratios
//! literally, and the finite-difference gradient evaluates that objective
//! with its own naive softmax. Only the AM-GM sweep reads the production
//! objectives, because those are what it audits.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::objectives::{gmpo_rollout_objective, grpo_rollout_objective, Sample};
use crate::policy::PolicyParams;
use crate::rng::{self, tag};
use crate::rollout::{ClipConfig, ClipMode, ObjectiveKind, PromptId, Rollout, RolloutGroup};
use crate::trainer::{analytic_gradient, samples_of};

/// Domain of [`linear_space_objective`].
pub const LINEAR_MAX_TOKENS: usize = 12;
pub const LINEAR_MAX_LOG_RATIO: f64 = 5.0;

pub const DEFAULT_FD_STEP: f64 = 1e-5;
/// Relative error floor: `|a - n| / max(|a|, |n|, 1e-12)`.
pub const REL_ERROR_FLOOR: f64 = 1e-12;
pub const GRAD_TOLERANCE: f64 = 1e-6;
/// Entries with both gradients at or below this are treated as agreeing
/// zeros: central differences at `h = 1e-5` carry roundoff of order
/// `eps_mach / h ~ 1e-11`, so smaller values cannot be resolved.
pub const FD_ZERO_TOLERANCE: f64 = 1e-9;
pub const AMGM_TOLERANCE: f64 = 1e-12;
pub const AMGM_EQUALITY_TOLERANCE: f64 = 1e-9;

fn clip_linear(x: f64, lo: f64, hi: f64) -> f64 {
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

/// The objectives evaluated literally in probability space: ratios are
/// formed as `p_new / p_old`, raised to `sgn(A)`, clipped, multiplied and
/// rooted.
pub fn linear_space_objective(
    new_logps: &[f64],
    rollout: &Rollout,
    advantage: f64,
    kind: ObjectiveKind,
    clip: &ClipConfig,
) -> Result<f64> {
    if new_logps.len() != rollout.len() {
        return Err(Error::Shape {
            context: "oracle new_logps",
            expected: rollout.len(),
            actual: new_logps.len(),
        });
    }
    let ratios: Vec<f64> = new_logps
        .iter()
        .zip(rollout.old_logps())
        .zip(rollout.mask())
        .filter(|(_, &m)| m)
        .map(|((n, o), _)| n.exp() / o.exp())
        .collect();
    if ratios.len() > LINEAR_MAX_TOKENS {
        return Err(Error::InvalidArgument(format!(
            "linear-space oracle handles at most {LINEAR_MAX_TOKENS} tokens, got {}",
            ratios.len()
        )));
    }
    if new_logps
        .iter()
        .zip(rollout.old_logps())
        .any(|(n, o)| !((n - o).abs() <= LINEAR_MAX_LOG_RATIO))
    {
        return Err(Error::InvalidArgument(format!(
            "linear-space oracle requires |log ratio| <= {LINEAR_MAX_LOG_RATIO}"
        )));
    }
    let clip = if kind == ObjectiveKind::GmpoNoClip || clip.mode == ClipMode::None {
        ClipConfig::none()
    } else {
        *clip
    };
    let (lo, hi) = (clip.lower_log.exp(), clip.upper_log.exp());
    let n = ratios.len() as f64;
    let positive = advantage > 0.0;
    let signed = |r: f64| if positive { r } else { 1.0 / r };

    let value = match kind {
        ObjectiveKind::Grpo => {
            ratios
                .iter()
                .map(|&r| (r * advantage).min(clip_linear(r, lo, hi) * advantage))
                .sum::<f64>()
                / n
        }
        ObjectiveKind::Gmpo | ObjectiveKind::GmpoNoClip | ObjectiveKind::GmpoNoNorm => {
            let product: f64 = ratios
                .iter()
                .map(|&r| {
                    let x = signed(r);
                    signed(x.min(clip_linear(x, lo, hi)))
                })
                .product();
            if kind == ObjectiveKind::GmpoNoNorm {
                product * advantage
            } else {
                product.powf(1.0 / n) * advantage
            }
        }
        ObjectiveKind::GmpoSeqClip => {
            let x = signed(ratios.iter().product());
            signed(x.min(clip_linear(x, lo, hi))).powf(1.0 / n) * advantage
        }
    };
    Ok(value)
}

/// Naive `log(exp(l_tok) / sum exp(l))`.
fn naive_log_prob(row: &[f64], token: usize) -> f64 {
    let z: f64 = row.iter().map(|l| l.exp()).sum();
    (row[token].exp() / z).ln()
}

fn oracle_batch_objective(
    logits: &[f64],
    vocab: usize,
    buckets: &[Vec<usize>],
    batch: &[Sample<'_>],
    kind: ObjectiveKind,
    clip: &ClipConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for (s, bs) in batch.iter().zip(buckets) {
        let new: Vec<f64> = bs
            .iter()
            .zip(s.rollout.tokens())
            .map(|(&b, &tok)| naive_log_prob(&logits[b * vocab..(b + 1) * vocab], tok))
            .collect();
        total += linear_space_objective(&new, s.rollout, s.advantage, kind, clip)?;
    }
    Ok(total / batch.len() as f64)
}

/// Central-difference gradient over the logits touched by `batch`.
#[derive(Debug, Clone)]
pub struct FiniteDiffGradient {
    /// `((bucket, token), dJ/dlogit)` for every entry of every touched row.
    pub entries: Vec<((usize, usize), f64)>,
    pub touched_buckets: Vec<usize>,
}

pub fn finite_diff_objective_grad(
    params: &PolicyParams,
    batch: &[Sample<'_>],
    kind: ObjectiveKind,
    clip: &ClipConfig,
    h: f64,
) -> Result<FiniteDiffGradient> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let vocab = params.vocab();
    let buckets: Vec<Vec<usize>> = batch.iter().map(|s| params.rollout_buckets(s.rollout)).collect();
    let mut touched: Vec<usize> = buckets.iter().flatten().copied().collect();
    touched.sort_unstable();
    touched.dedup();

    let mut logits = params.logits().to_vec();
    let mut entries = Vec::with_capacity(touched.len() * vocab);
    for &b in &touched {
        for v in 0..vocab {
            let i = b * vocab + v;
            let base = logits[i];
            logits[i] = base + h;
            let plus = oracle_batch_objective(&logits, vocab, &buckets, batch, kind, clip)?;
            logits[i] = base - h;
            let minus = oracle_batch_objective(&logits, vocab, &buckets, batch, kind, clip)?;
            logits[i] = base;
            entries.push(((b, v), (plus - minus) / (2.0 * h)));
        }
    }
    Ok(FiniteDiffGradient {
        entries,
        touched_buckets: touched,
    })
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Outcome of comparing analytic and numeric gradients on one instance.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(bucket, token)` of the worst entry.
    pub worst_parameter: (usize, usize),
    pub kind: ObjectiveKind,
    pub clip: ClipConfig,
    pub instance: String,
    /// At least one token (or sequence) was clipped.
    pub clipping_active: bool,
    /// Touched entries where both gradients were below [`FD_ZERO_TOLERANCE`].
    pub zero_entries: usize,
    /// Untouched logits with a nonzero analytic gradient.
    pub untouched_nonzero: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.untouched_nonzero == 0
    }
}

/// Compares the trainer's analytic gradient against central differences.
pub fn compare_gradients(
    params: &PolicyParams,
    batch: &[Sample<'_>],
    kind: ObjectiveKind,
    clip: &ClipConfig,
    h: f64,
    instance: String,
) -> Result<GradCheckReport> {
    let (analytic, eval, _) = analytic_gradient(params, batch, kind, clip)?;
    let fd = finite_diff_objective_grad(params, batch, kind, clip, h)?;
    let mut worst = (0.0, (0, 0));
    let mut zero_entries = 0;
    for &((b, v), numeric) in &fd.entries {
        let a = analytic.get(b, v);
        if a.abs().max(numeric.abs()) <= FD_ZERO_TOLERANCE {
            zero_entries += 1;
            continue;
        }
        let err = relative_error(a, numeric);
        if err > worst.0 {
            worst = (err, (b, v));
        }
    }
    let untouched_nonzero = (0..params.buckets())
        .filter(|b| fd.touched_buckets.binary_search(b).is_err())
        .map(|b| analytic.row(b).iter().filter(|&&g| g != 0.0).count())
        .sum();
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_parameter: worst.1,
        kind,
        clip: *clip,
        instance,
        clipping_active: eval.results.iter().any(|r| r.clipped_count() > 0),
        zero_entries,
        untouched_nonzero,
    })
}

/// Randomly generated grad-check problem; owns its rollouts.
#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub params: PolicyParams,
    pub groups: Vec<RolloutGroup>,
    pub kind: ObjectiveKind,
    pub clip: ClipConfig,
    pub description: String,
}

fn normal(r: &mut rng::Stream) -> f64 {
    StandardNormal.sample(r)
}

/// Distance below which a log ratio counts as sitting on a clip kink.
fn kink_margin(h: f64, len: usize) -> f64 {
    10.0 * h * len as f64
}

fn near_kink(inst: &GradCheckInstance, h: f64) -> Result<bool> {
    let (lower, upper) = match (inst.kind, inst.clip.mode) {
        (ObjectiveKind::GmpoNoClip, _) | (_, ClipMode::None) => return Ok(false),
        _ => (inst.clip.lower_log, inst.clip.upper_log),
    };
    for g in &inst.groups {
        for (r, &adv) in g.rollouts().iter().zip(g.advantages()) {
            let new = inst.params.rollout_logps(r)?;
            let diffs: Vec<f64> = new.iter().zip(r.old_logps()).map(|(n, o)| n - o).collect();
            let margin = kink_margin(h, r.len());
            let sign = if adv > 0.0 { 1.0 } else { -1.0 };
            let points: Vec<f64> = if inst.kind == ObjectiveKind::GmpoSeqClip {
                vec![sign * diffs.iter().sum::<f64>()]
            } else {
                diffs.iter().map(|d| sign * d).collect()
            };
            // Both thresholds are checked; GRPO's lower bound binds in raw space.
            let raw_lower_hit = inst.kind == ObjectiveKind::Grpo
                && diffs.iter().any(|d| (d - lower).abs() < margin);
            if raw_lower_hit || points.iter().any(|x| (x - upper).abs() < margin || (x - lower).abs() < margin) {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Builds instance `index` of a sweep seeded with `seed`: up to 5 tokens of
/// vocabulary, at most 6 tokens per rollout, a few shared buckets, and old
/// policies perturbed enough that clipping is frequently active.
pub fn grad_check_instance(seed: u64, index: usize, h: f64) -> Result<GradCheckInstance> {
    let kind = ObjectiveKind::ALL[index % ObjectiveKind::ALL.len()];
    for attempt in 0u64.. {
        let mut r = rng::stream(seed, &[tag::ORACLE, index as u64, attempt]);
        let vocab = r.random_range(2..=5);
        let buckets = r.random_range(1..=8);
        let k = r.random_range(0..=2);
        let logits: Vec<f64> = (0..buckets * vocab).map(|_| normal(&mut r)).collect();
        let params = PolicyParams::from_logits(buckets, vocab, k, logits.clone())?;
        let spread = [0.05, 0.3, 0.8][r.random_range(0..3)];
        let old_logits: Vec<f64> = logits.iter().map(|l| l + spread * normal(&mut r)).collect();
        let old = PolicyParams::from_logits(buckets, vocab, k, old_logits)?;

        let clip = if r.random_bool(0.2) {
            ClipConfig::none()
        } else {
            kind.default_clip()
        };
        let clip = if kind.accepts_mode(clip.mode) { clip } else { kind.default_clip() };

        let mut groups = Vec::new();
        for g in 0..r.random_range(1..=2u64) {
            let size = r.random_range(2..=4);
            let mut rollouts = Vec::with_capacity(size);
            for _ in 0..size {
                let len = r.random_range(1..=6);
                let tokens: Vec<usize> = (0..len).map(|_| r.random_range(0..vocab)).collect();
                let probe = Rollout::new(PromptId(g), tokens.clone(), vec![0.0; len])?;
                let old_lp = old.rollout_logps(&probe)?;
                rollouts.push(Rollout::new(PromptId(g), tokens, old_lp)?);
            }
            let mut rewards: Vec<f64> = (0..size).map(|_| f64::from(r.random_bool(0.5))).collect();
            if r.random_bool(0.85) && rewards.iter().all(|&x| x == rewards[0]) {
                rewards[0] = 1.0 - rewards[0];
            }
            groups.push(RolloutGroup::new(rollouts, rewards)?);
        }
        let inst = GradCheckInstance {
            params,
            groups,
            kind,
            clip,
            description: format!(
                "seed={seed} index={index} attempt={attempt} kind={kind} V={vocab} H={buckets} k={k} spread={spread} clip=({}, {}, {})",
                clip.lower_log, clip.upper_log, clip.mode
            ),
        };
        if !near_kink(&inst, h)? {
            return Ok(inst);
        }
    }
    unreachable!("attempt counter is unbounded")
}

pub fn grad_check_one(inst: &GradCheckInstance, h: f64) -> Result<GradCheckReport> {
    compare_gradients(
        &inst.params,
        &samples_of(&inst.groups),
        inst.kind,
        &inst.clip,
        h,
        inst.description.clone(),
    )
}

/// Aggregate of a grad-check sweep.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckSweep {
    pub instances: usize,
    pub seed: u64,
    pub max_rel_error: f64,
    pub worst: Option<GradCheckReport>,
    pub failures: Vec<GradCheckReport>,
    /// Fraction of instances in which clipping was active.
    pub clipping_fraction: f64,
}

impl GradCheckSweep {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn grad_check_sweep(instances: usize, seed: u64, h: f64) -> Result<GradCheckSweep> {
    if instances == 0 {
        return Err(Error::InvalidArgument("need at least one instance".into()));
    }
    let mut worst: Option<GradCheckReport> = None;
    let mut failures = Vec::new();
    let mut clipped = 0usize;
    for i in 0..instances {
        let report = grad_check_one(&grad_check_instance(seed, i, h)?, h)?;
        clipped += usize::from(report.clipping_active);
        if !report.passed(GRAD_TOLERANCE) {
            failures.push(report.clone());
        }
        if worst.as_ref().is_none_or(|w| report.max_rel_error > w.max_rel_error) {
            worst = Some(report);
        }
    }
    Ok(GradCheckSweep {
        instances,
        seed,
        max_rel_error: worst.as_ref().map_or(0.0, |w| w.max_rel_error),
        worst,
        failures,
        clipping_fraction: clipped as f64 / instances as f64,
    })
}

/// An instance violating `|J_gmpo| <= |J_grpo|` (or equality when forced).
#[derive(Debug, Clone, Serialize)]
pub struct AmgmViolation {
    pub index: usize,
    pub forced_equal: bool,
    pub advantage: f64,
    pub log_ratios: Vec<f64>,
    pub grpo: f64,
    pub gmpo: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AmgmReport {
    pub instances: usize,
    pub seed: u64,
    /// Smallest `|J_grpo| - |J_gmpo|` over random instances.
    pub worst_margin: f64,
    /// Largest `||J_grpo| - |J_gmpo||` over forced-equal instances.
    pub max_equality_gap: f64,
    pub violations: Vec<AmgmViolation>,
}

impl AmgmReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn unclipped_pair(diffs: &[f64], advantage: f64) -> Result<(f64, f64)> {
    let old = vec![-20.0; diffs.len()];
    let rollout = Rollout::new(PromptId(0), vec![0; diffs.len()], old)?;
    let new: Vec<f64> = diffs.iter().map(|d| d - 20.0).collect();
    let none = ClipConfig::none();
    let grpo = grpo_rollout_objective(&new, &rollout, advantage, &none)?.value;
    let gmpo = gmpo_rollout_objective(&new, &rollout, advantage, &none)?.value;
    Ok((grpo, gmpo))
}

/// Checks AM-GM dominance of the unclipped objectives on `instances` random
/// rollouts (`|o|` in `[1, 50]`, log ratios standard normal, nonzero
/// advantages), plus one forced-equal-ratio instance per random one.
pub fn amgm_sweep(instances: usize, seed: u64) -> Result<AmgmReport> {
    if instances == 0 {
        return Err(Error::InvalidArgument("need at least one instance".into()));
    }
    let mut worst_margin = f64::INFINITY;
    let mut max_equality_gap: f64 = 0.0;
    let mut violations = Vec::new();
    for index in 0..instances {
        let mut r = rng::stream(seed, &[tag::ORACLE, index as u64]);
        let len = r.random_range(1..=50);
        let diffs: Vec<f64> = (0..len).map(|_| normal(&mut r)).collect();
        let mut advantage = 0.0;
        while advantage == 0.0 {
            advantage = r.random_range(-3.0..3.0);
        }
        let (grpo, gmpo) = unclipped_pair(&diffs, advantage)?;
        let margin = grpo.abs() - gmpo.abs();
        worst_margin = worst_margin.min(margin);
        if margin < -AMGM_TOLERANCE {
            violations.push(AmgmViolation {
                index,
                forced_equal: false,
                advantage,
                log_ratios: diffs.clone(),
                grpo,
                gmpo,
            });
        }

        let equal = vec![diffs[0]; len];
        let (grpo, gmpo) = unclipped_pair(&equal, advantage)?;
        let gap = (grpo.abs() - gmpo.abs()).abs();
        max_equality_gap = max_equality_gap.max(gap);
        if gap > AMGM_EQUALITY_TOLERANCE {
            violations.push(AmgmViolation {
                index,
                forced_equal: true,
                advantage,
                log_ratios: equal,
                grpo,
                gmpo,
            });
        }
    }
    Ok(AmgmReport {
        instances,
        seed,
        worst_margin,
        max_equality_gap,
        violations,
    })
}

/// Worst relative gap between the log-space GMPO objective and the
/// linear-space oracle over `instances` random small rollouts.
pub fn log_space_sweep(instances: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for index in 0..instances {
        let mut r = rng::stream(seed, &[tag::ORACLE, 0x4c4f47, index as u64]);
        let len = r.random_range(1..=LINEAR_MAX_TOKENS);
        let old: Vec<f64> = (0..len).map(|_| -r.random_range(0.05..4.0)).collect();
        let new: Vec<f64> = old.iter().map(|o| o + r.random_range(-1.0..1.0)).collect();
        let rollout = Rollout::new(PromptId(0), vec![0; len], old)?;
        let mut advantage = 0.0;
        while advantage == 0.0 {
            advantage = r.random_range(-2.5..2.5);
        }
        let clip = if r.random_bool(0.5) {
            ClipConfig::symmetric_log(0.4)
        } else {
            ClipConfig::none()
        };
        let fast = gmpo_rollout_objective(&new, &rollout, advantage, &clip)?.value;
        let slow = linear_space_objective(&new, &rollout, advantage, ObjectiveKind::Gmpo, &clip)?;
        worst = worst.max((fast - slow).abs() / slow.abs().max(REL_ERROR_FLOOR));
    }
    Ok(worst)
}
