//! The RL outer loop.
//!
//! Each round freezes the current policy as the old policy, samples
//! `group_size` rollouts for each of `prompts_per_round` prompts, normalizes
//! rewards within every group, then runs `inner_updates` gradient-ascent
//! steps on the stale data. Rollouts are shuffled once per pass with the
//! round's stream and split into `inner_updates` contiguous minibatches, so
//! every rollout is used exactly once per pass (the first
//! `N mod inner_updates` minibatches hold one extra rollout). The old policy
//! is synced only at round end.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Task, TaskConfig};
use crate::error::{Error, Result};
use crate::objectives::{evaluate_batch, BatchEvaluation, Sample};
use crate::policy::{Gradient, PolicyParams, PolicySnapshot};
use crate::rng::{self, tag};
use crate::rollout::{ClipConfig, ObjectiveKind, RolloutGroup};
use crate::telemetry::{self, StepTelemetry};

/// Shape of the tabular policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub buckets: usize,
    pub context_order: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            buckets: 4096,
            context_order: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub group_size: usize,
    pub prompts_per_round: usize,
    pub inner_updates: usize,
    /// Passes over each round's data; 1 means every rollout is seen once.
    pub epochs_per_round: usize,
    pub step_size: f64,
    /// Heavy-ball momentum; 0 is plain gradient ascent.
    pub momentum: f64,
    pub total_rounds: usize,
    /// Sampling temperature for training rollouts.
    pub temperature: f64,
    pub objective: ObjectiveKind,
    pub clip: ClipConfig,
    pub seed: u64,
    pub policy: PolicyConfig,
    pub task: TaskConfig,
}

impl TrainConfig {
    /// Desk-scale version of the 8 rollouts x 128 prompts, 8 updates protocol.
    pub fn new(objective: ObjectiveKind, task: TaskConfig) -> Self {
        Self {
            group_size: 8,
            prompts_per_round: 128,
            inner_updates: 8,
            epochs_per_round: 1,
            step_size: 1.0,
            momentum: 0.0,
            total_rounds: 40,
            temperature: 1.0,
            objective,
            clip: objective.default_clip(),
            seed: 0,
            policy: PolicyConfig::default(),
            task,
        }
    }

    pub fn rollouts_per_round(&self) -> usize {
        self.group_size * self.prompts_per_round
    }

    /// Nominal minibatch size `G * prompts_per_round / inner_updates`.
    pub fn minibatch_rollouts(&self) -> usize {
        self.rollouts_per_round() / self.inner_updates
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.group_size < 2 {
            return fail(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.prompts_per_round == 0 {
            return fail("prompts_per_round must be >= 1".into());
        }
        if self.inner_updates == 0 || self.inner_updates > self.rollouts_per_round() {
            return fail(format!(
                "inner_updates must lie in [1, {}], got {}",
                self.rollouts_per_round(),
                self.inner_updates
            ));
        }
        if self.epochs_per_round == 0 {
            return fail("epochs_per_round must be >= 1".into());
        }
        if !(self.step_size.is_finite() && self.step_size >= 0.0) {
            return fail(format!("step_size must be finite and >= 0, got {}", self.step_size));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return fail(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if !self.objective.accepts_mode(self.clip.mode) {
            return fail(format!(
                "objective {} does not accept clip mode {}",
                self.objective, self.clip.mode
            ));
        }
        ClipConfig::new(self.clip.lower_log, self.clip.upper_log, self.clip.mode)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.policy.buckets == 0 {
            return fail("policy.buckets must be >= 1".into());
        }
        Ok(())
    }
}

/// Plain or heavy-ball gradient ascent.
#[derive(Debug, Clone)]
pub struct Optimizer {
    step_size: f64,
    momentum: f64,
    velocity: Option<Gradient>,
}

impl Optimizer {
    pub fn new(step_size: f64, momentum: f64) -> Self {
        Self {
            step_size,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut PolicyParams, gradient: &Gradient) -> Result<()> {
        if self.momentum == 0.0 {
            return params.apply_gradient(gradient, self.step_size);
        }
        let v = match self.velocity.take() {
            Some(mut v) => {
                v.scale(self.momentum);
                let merged: Vec<f64> = v
                    .values()
                    .iter()
                    .zip(gradient.values())
                    .map(|(a, b)| a + b)
                    .collect();
                Gradient::from_values(params.buckets(), params.vocab(), merged)?
            }
            None => gradient.clone(),
        };
        params.apply_gradient(&v, self.step_size)?;
        self.velocity = Some(v);
        Ok(())
    }
}

/// Samples one round of groups from the frozen old policy.
pub fn collect_round(
    old: &PolicySnapshot,
    task: &Task,
    config: &TrainConfig,
    round: usize,
) -> Result<Vec<RolloutGroup>> {
    let prompts = task.prompts();
    if prompts.is_empty() {
        return Err(Error::Config("task has an empty prompt set".into()));
    }
    (0..config.prompts_per_round)
        .into_par_iter()
        .map(|slot| {
            let prompt = prompts[(round * config.prompts_per_round + slot) % prompts.len()];
            let mut stream = rng::stream(config.seed, &[tag::ROLLOUT, round as u64, slot as u64]);
            let mut rollouts = Vec::with_capacity(config.group_size);
            let mut rewards = Vec::with_capacity(config.group_size);
            for _ in 0..config.group_size {
                let r = old.sample_rollout(
                    prompt,
                    task.eos(),
                    task.max_len(),
                    config.temperature,
                    &mut stream,
                )?;
                rewards.push(task.verify(prompt, r.tokens()));
                rollouts.push(r);
            }
            RolloutGroup::new(rollouts, rewards)
        })
        .collect()
}

/// Flattens groups into samples in group order.
pub fn samples_of(groups: &[RolloutGroup]) -> Vec<Sample<'_>> {
    groups
        .iter()
        .flat_map(|g| {
            g.rollouts()
                .iter()
                .zip(g.advantages())
                .map(|(rollout, &advantage)| Sample { rollout, advantage })
        })
        .collect()
}

/// Shuffles sample indices with the round's stream and splits them into
/// `parts` contiguous minibatches.
pub fn partition(len: usize, parts: usize, seed: u64, round: usize, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::SHUFFLE, round as u64, epoch as u64]));
    let base = len / parts;
    let extra = len % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let size = base + usize::from(i < extra);
        out.push(order[start..start + size].to_vec());
        start += size;
    }
    out
}

/// Exact gradient of the batch objective with respect to every logit:
/// `(1/N) sum_rollouts sum_t c_t * score(bucket_t, token_t)`.
pub fn analytic_gradient(
    params: &PolicyParams,
    batch: &[Sample<'_>],
    kind: ObjectiveKind,
    clip: &ClipConfig,
) -> Result<(Gradient, BatchEvaluation, Vec<Vec<f64>>)> {
    let buckets: Vec<Vec<usize>> = batch.iter().map(|s| params.rollout_buckets(s.rollout)).collect();
    let new_logps = batch
        .iter()
        .zip(&buckets)
        .map(|(s, bs)| {
            bs.iter()
                .zip(s.rollout.tokens())
                .map(|(&b, &tok)| params.log_prob(b, tok))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let eval = evaluate_batch(batch, &new_logps, kind, clip)?;
    let mut grad = Gradient::zeros_like(params);
    let inv_n = 1.0 / batch.len() as f64;
    for ((s, res), bs) in batch.iter().zip(&eval.results).zip(&buckets) {
        for ((&b, &tok), &c) in bs.iter().zip(s.rollout.tokens()).zip(&res.token_scores) {
            grad.add_score(params, b, tok, c * inv_n);
        }
    }
    Ok((grad, eval, new_logps))
}

/// Bookkeeping attached to one inner update's telemetry.
#[derive(Debug, Clone, Copy)]
pub struct UpdateContext {
    pub round: usize,
    pub update: usize,
    pub mean_reward: f64,
}

/// One ascent step on `batch`; returns the diagnostics measured before the
/// step.
pub fn inner_update(
    params: &mut PolicyParams,
    reference: &PolicyParams,
    batch: &[Sample<'_>],
    kind: ObjectiveKind,
    clip: &ClipConfig,
    optimizer: &mut Optimizer,
    ctx: UpdateContext,
) -> Result<StepTelemetry> {
    let (grad, eval, new_logps) = analytic_gradient(params, batch, kind, clip)?;
    if !grad.is_finite() || !eval.value.is_finite() {
        return Err(Error::NonFinite(dump_offender(params, batch, &new_logps, &eval)));
    }

    let rollouts: Vec<_> = batch.iter().map(|s| s.rollout).collect();
    let (ratio_log_min, ratio_log_max) = telemetry::ratio_envelope(&rollouts, &new_logps)?;
    let mut entropy_sum = 0.0;
    let mut valid = 0usize;
    let mut clipped = 0usize;
    for (s, res) in batch.iter().zip(&eval.results) {
        for ((b, &m), &c) in params
            .rollout_buckets(s.rollout)
            .into_iter()
            .zip(s.rollout.mask())
            .zip(&res.clipped_flags)
        {
            if m {
                entropy_sum += params.entropy(b)?;
                valid += 1;
                clipped += usize::from(c);
            }
        }
    }
    let record = StepTelemetry {
        round: ctx.round,
        update: ctx.update,
        ratio_log_min,
        ratio_log_max,
        mean_entropy: entropy_sum / valid as f64,
        kl_ref: telemetry::kl_estimate(params, reference, &rollouts)?,
        mean_reward: ctx.mean_reward,
        clip_fraction: clipped as f64 / valid as f64,
        objective_value: eval.value,
    };
    optimizer.step(params, &grad)?;
    Ok(record)
}

fn dump_offender(
    params: &PolicyParams,
    batch: &[Sample<'_>],
    new_logps: &[Vec<f64>],
    eval: &BatchEvaluation,
) -> String {
    let bad = batch
        .iter()
        .zip(new_logps)
        .zip(&eval.results)
        .position(|((s, _), res)| {
            let mut g = Gradient::zeros_like(params);
            for ((b, &tok), &c) in params
                .rollout_buckets(s.rollout)
                .into_iter()
                .zip(s.rollout.tokens())
                .zip(&res.token_scores)
            {
                g.add_score(params, b, tok, c);
            }
            !g.is_finite() || !res.value.is_finite()
        })
        .unwrap_or(0);
    let s = &batch[bad];
    format!(
        "rollout #{bad} prompt={} tokens={:?} old_logps={:?} new_logps={:?} advantage={:?} value={:?} scores={:?}",
        s.rollout.prompt(),
        s.rollout.tokens(),
        s.rollout.old_logps(),
        new_logps[bad],
        s.advantage,
        eval.results[bad].value,
        eval.results[bad].token_scores,
    )
}

/// Headline numbers of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub objective: ObjectiveKind,
    pub clip: ClipConfig,
    pub rounds: usize,
    pub updates: usize,
    /// Mean reward of the last round's rollouts.
    pub final_mean_reward: f64,
    /// Trailing 50-update moving average of `mean_reward`.
    pub final_reward_ma50: f64,
    /// Greedy decoding, one answer per prompt, over the whole prompt set.
    pub greedy_pass_at_1: f64,
    pub mean_envelope_width: f64,
    pub final_round_entropy: f64,
    pub final_round_kl_ref: f64,
    pub mean_clip_fraction: f64,
    pub advantage_std: String,
    pub kl_estimator: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub telemetry: Vec<StepTelemetry>,
    pub summary: TrainSummary,
}

/// Greedy Pass@1 of `params` over all prompts of `task`.
pub fn greedy_pass_at_1(params: &PolicyParams, task: &Task) -> Result<f64> {
    let mut stream = rng::stream(0, &[]);
    let mut hits = 0.0;
    for &p in task.prompts() {
        let r = params.sample_rollout(p, task.eos(), task.max_len(), 0.0, &mut stream)?;
        hits += task.verify(p, r.tokens());
    }
    Ok(hits / task.prompts().len() as f64)
}

/// Trailing moving average of the last `window` values.
pub fn trailing_mean(values: &[f64], window: usize) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let tail = &values[values.len().saturating_sub(window)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

pub fn summarize(
    config: &TrainConfig,
    params: &PolicyParams,
    task: &Task,
    series: &[StepTelemetry],
) -> Result<TrainSummary> {
    let mean = |xs: &mut dyn Iterator<Item = f64>| {
        let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    let last_round = series.last().map(|r| r.round);
    let final_round: Vec<&StepTelemetry> =
        series.iter().filter(|r| Some(r.round) == last_round).collect();
    let rewards: Vec<f64> = series.iter().map(|r| r.mean_reward).collect();
    Ok(TrainSummary {
        objective: config.objective,
        clip: config.clip,
        rounds: config.total_rounds,
        updates: series.len(),
        final_mean_reward: series.last().map_or(0.0, |r| r.mean_reward),
        final_reward_ma50: trailing_mean(&rewards, 50),
        greedy_pass_at_1: greedy_pass_at_1(params, task)?,
        mean_envelope_width: mean(&mut series.iter().map(StepTelemetry::envelope_width)),
        final_round_entropy: mean(&mut final_round.iter().map(|r| r.mean_entropy)),
        final_round_kl_ref: mean(&mut final_round.iter().map(|r| r.kl_ref)),
        mean_clip_fraction: mean(&mut series.iter().map(|r| r.clip_fraction)),
        advantage_std: "population (divide by G), floor 1e-8".into(),
        kl_estimator: telemetry::KL_ESTIMATOR.into(),
    })
}

/// Runs the full protocol; deterministic given `config.seed`.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let task = config.task.build()?;
    let mut params = PolicyParams::uniform(
        config.policy.buckets,
        task.vocab_size(),
        config.policy.context_order,
    )?;
    let reference = PolicySnapshot::new(&params);
    let mut optimizer = Optimizer::new(config.step_size, config.momentum);
    let mut series = Vec::with_capacity(config.total_rounds * config.inner_updates);

    for round in 0..config.total_rounds {
        let old = PolicySnapshot::new(&params);
        let groups = collect_round(&old, &task, config, round)?;
        let samples = samples_of(&groups);
        let mean_reward =
            groups.iter().flat_map(|g| g.rewards()).sum::<f64>() / samples.len() as f64;
        for epoch in 0..config.epochs_per_round {
            let parts = partition(samples.len(), config.inner_updates, config.seed, round, epoch);
            for (i, idx) in parts.iter().enumerate() {
                let batch: Vec<Sample<'_>> = idx.iter().map(|&j| samples[j]).collect();
                let ctx = UpdateContext {
                    round,
                    update: epoch * config.inner_updates + i,
                    mean_reward,
                };
                series.push(inner_update(
                    &mut params,
                    &reference,
                    &batch,
                    config.objective,
                    &config.clip,
                    &mut optimizer,
                    ctx,
                )?);
            }
        }
    }
    let summary = summarize(config, &params, &task, &series)?;
    Ok(TrainOutcome {
        params,
        telemetry: series,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::{PromptId, Rollout};

    fn small_config(objective: ObjectiveKind) -> TrainConfig {
        TrainConfig {
            group_size: 2,
            prompts_per_round: 4,
            inner_updates: 2,
            total_rounds: 2,
            policy: PolicyConfig {
                buckets: 256,
                context_order: 2,
            },
            ..TrainConfig::new(objective, TaskConfig::parity_default())
        }
    }

    #[test]
    fn partition_covers_each_sample_once() {
        let parts = partition(10, 3, 5, 0, 0);
        assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 3, 3]);
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(parts, partition(10, 3, 5, 0, 0));
        assert_ne!(parts, partition(10, 3, 5, 1, 0));
    }

    #[test]
    fn single_prompt_round() {
        let cfg = TrainConfig {
            prompts_per_round: 1,
            ..small_config(ObjectiveKind::Gmpo)
        };
        let task = cfg.task.build().unwrap();
        let old = PolicySnapshot::new(&PolicyParams::uniform(256, 3, 2).unwrap());
        let groups = collect_round(&old, &task, &cfg, 0).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].len(), 2);
        assert!(groups[0].advantages().iter().sum::<f64>().abs() < 1e-12);
        assert_eq!(groups, collect_round(&old, &task, &cfg, 0).unwrap());
    }

    #[test]
    fn zero_step_leaves_params_but_records_telemetry() {
        let cfg = TrainConfig {
            step_size: 0.0,
            ..small_config(ObjectiveKind::Grpo)
        };
        let out = train(&cfg).unwrap();
        assert!(out.params.logits().iter().all(|&l| l == 0.0));
        assert_eq!(out.telemetry.len(), 4);
        for rec in &out.telemetry {
            assert_eq!(rec.ratio_log_min, 0.0);
            assert_eq!(rec.ratio_log_max, 0.0);
        }
    }

    #[test]
    fn zero_rounds() {
        let cfg = TrainConfig {
            total_rounds: 0,
            ..small_config(ObjectiveKind::Gmpo)
        };
        let out = train(&cfg).unwrap();
        assert!(out.telemetry.is_empty());
        assert_eq!(out.params, PolicyParams::uniform(256, 3, 2).unwrap());
    }

    #[test]
    fn single_token_update_matches_hand_composition() {
        let mut params = PolicyParams::uniform(4, 3, 0).unwrap();
        let bucket = params.bucket(PromptId(0), &[]);
        let lp = params.log_prob(bucket, 1).unwrap();
        let rollout = Rollout::new(PromptId(0), vec![1], vec![lp]).unwrap();
        let batch = [Sample {
            rollout: &rollout,
            advantage: 1.0,
        }];
        let reference = params.clone();
        let mut opt = Optimizer::new(0.1, 0.0);
        let ctx = UpdateContext {
            round: 0,
            update: 0,
            mean_reward: 1.0,
        };
        inner_update(
            &mut params,
            &reference,
            &batch,
            ObjectiveKind::Gmpo,
            &ClipConfig::symmetric_log(0.4),
            &mut opt,
            ctx,
        )
        .unwrap();
        // value = 1, |o| = 1, score = onehot(1) - 1/3.
        let expect = [-0.1 / 3.0, 0.1 * (2.0 / 3.0), -0.1 / 3.0];
        for (got, want) in params.row(bucket).iter().zip(expect) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_advantage_groups_give_zero_gradient() {
        let params = PolicyParams::from_logits(4, 3, 1, (0..12).map(|i| i as f64 * 0.1).collect())
            .unwrap();
        let r = Rollout::new(PromptId(1), vec![0, 2], vec![-1.5, -0.7]).unwrap();
        let group = RolloutGroup::new(vec![r.clone(), r], vec![1.0, 1.0]).unwrap();
        for kind in ObjectiveKind::ALL {
            let (g, _, _) =
                analytic_gradient(&params, &samples_of(&[group.clone()]), kind, &kind.default_clip())
                    .unwrap();
            assert!(g.values().iter().all(|&x| x == 0.0), "{kind}");
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = PolicyParams::uniform(1, 2, 0).unwrap();
        let g = Gradient::from_values(1, 2, vec![1.0, 0.0]).unwrap();
        let mut opt = Optimizer::new(1.0, 0.5);
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p.logits()[0], 2.5);
    }

    #[test]
    fn config_validation() {
        let ok = small_config(ObjectiveKind::Gmpo);
        assert!(ok.validate().is_ok());
        let bad = [
            TrainConfig { group_size: 1, ..ok.clone() },
            TrainConfig { inner_updates: 0, ..ok.clone() },
            TrainConfig { inner_updates: 100, ..ok.clone() },
            TrainConfig { step_size: f64::NAN, ..ok.clone() },
            TrainConfig { momentum: 1.0, ..ok.clone() },
            TrainConfig { clip: ClipConfig::sequence(-0.4, 0.4).unwrap(), ..ok.clone() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
        assert_eq!(ok.minibatch_rollouts(), 4);
    }
}
