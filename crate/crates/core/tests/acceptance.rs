//! Acceptance suite. Every test prints one `criterion N: PASS|FAIL ...` line.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use gmpo::config::{ConfigFile, Overrides};
use gmpo::objectives::{gmpo_rollout_objective, gradient_weight_comparison, grpo_rollout_objective};
use gmpo::oracle;
use gmpo::rng;
use gmpo::rollout::{ClipConfig, ObjectiveKind, PromptId, Rollout};
use gmpo::trainer::{train, TrainConfig, TrainSummary};
use rand::Rng;

const AMGM_INSTANCES: usize = 10_000;
const AMGM_BUDGET: Duration = Duration::from_secs(5);
const GRAD_INSTANCES: usize = 100;
const GRAD_BUDGET: Duration = Duration::from_secs(10);
const GRAD_TOL: f64 = 1e-6;
const MIN_CLIPPED_SHARE: f64 = 0.30;
const WEIGHT_TOL: f64 = 1e-9;
const LOG_SPACE_INSTANCES: usize = 1_000;
const LOG_SPACE_TOL: f64 = 1e-12;
const PESSIMISM_INSTANCES: usize = 10_000;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const MIN_SEED_WINS: usize = 4;
const COPY_BUDGET: Duration = Duration::from_secs(300);
const PARITY_REWARD: f64 = 0.9;

fn report(n: u32, ok: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn load(name: &str, objective: ObjectiveKind, seed: u64) -> TrainConfig {
    ConfigFile::load(&repo_config(name))
        .unwrap()
        .resolve(&Overrides {
            objective: Some(objective),
            seed: Some(seed),
            ..Default::default()
        })
        .unwrap()
}

#[test]
fn criterion_1_amgm_dominance() {
    let t = Instant::now();
    let r = oracle::amgm_sweep(AMGM_INSTANCES, 0).unwrap();
    let elapsed = t.elapsed();
    report(
        1,
        r.passed() && r.max_equality_gap <= 1e-9 && elapsed < AMGM_BUDGET,
        format!(
            "{} instances, {} violations, worst margin {:.3e}, forced-equal gap {:.3e}, {:.2?}",
            r.instances,
            r.violations.len(),
            r.worst_margin,
            r.max_equality_gap,
            elapsed
        ),
    );
}

#[test]
fn criterion_2_gradient_equations() {
    let t = Instant::now();
    let s = oracle::grad_check_sweep(GRAD_INSTANCES, 0, oracle::DEFAULT_FD_STEP).unwrap();
    let elapsed = t.elapsed();
    report(
        2,
        s.passed()
            && s.max_rel_error < GRAD_TOL
            && s.clipping_fraction >= MIN_CLIPPED_SHARE
            && elapsed < GRAD_BUDGET,
        format!(
            "max relative error {:.3e}, clipping active in {:.0}% of {} instances, {:.2?}",
            s.max_rel_error,
            100.0 * s.clipping_fraction,
            s.instances,
            elapsed
        ),
    );
}

#[test]
fn criterion_3_outlier_weight_scaling() {
    let mut ok = true;
    let mut detail = Vec::new();
    for r in [2.0, 10.0, 100.0] {
        let w = gradient_weight_comparison(&[r, 1.0, 1.0, 1.0]).unwrap();
        let grpo_max = w.grpo.iter().copied().fold(f64::MIN, f64::max);
        let expected = f64::powf(r, 0.25);
        ok &= (grpo_max - r).abs() < WEIGHT_TOL && (w.gmpo - expected).abs() < WEIGHT_TOL;
        detail.push(format!("R={r}: grpo {grpo_max} gmpo {:.12}", w.gmpo));
    }
    report(3, ok, detail.join(", "));
}

#[test]
fn criterion_4_log_space_correctness() {
    let worst = oracle::log_space_sweep(LOG_SPACE_INSTANCES, 0).unwrap();
    let mut r = rng::stream(4, &[]);
    let d: Vec<f64> = (0..1000).map(|_| r.random_range(0.5f64..2.0).ln()).collect();
    let old = vec![-5.0; d.len()];
    let new: Vec<f64> = d.iter().map(|x| x - 5.0).collect();
    let rollout = Rollout::new(PromptId(0), vec![0; d.len()], old).unwrap();
    let mut finite = true;
    for clip in [ClipConfig::symmetric_log(0.4), ClipConfig::none()] {
        for adv in [1.3, -0.7] {
            let res = gmpo_rollout_objective(&new, &rollout, adv, &clip).unwrap();
            finite &= res.value.is_finite() && res.value != 0.0;
            finite &= res.token_scores.iter().all(|c| c.is_finite());
        }
    }
    let expected = (d.iter().sum::<f64>() / 1000.0).exp();
    let got = gmpo_rollout_objective(&new, &rollout, 1.0, &ClipConfig::none())
        .unwrap()
        .value;
    finite &= ((got - expected) / expected).abs() < 1e-12;
    report(
        4,
        worst < LOG_SPACE_TOL && finite,
        format!("worst relative gap {worst:.3e} over {LOG_SPACE_INSTANCES}; |o|=1000 finite: {finite}"),
    );
}

#[test]
fn criterion_5_pessimistic_clip_semantics() {
    let mut r = rng::stream(5, &[]);
    let mut bad = 0usize;
    let eps = 0.4;
    let token = ClipConfig::symmetric_log(eps);
    let linear = ClipConfig::linear(0.2).unwrap();
    let none = ClipConfig::none();
    for _ in 0..PESSIMISM_INSTANCES {
        let len = r.random_range(1..=16);
        let d: Vec<f64> = (0..len).map(|_| r.random_range(-1.5..1.5)).collect();
        let adv = if r.random_bool(0.5) { 1.0 } else { -1.0 } * r.random_range(0.01..3.0);
        let old = vec![-2.0; len];
        let new: Vec<f64> = d.iter().map(|x| x - 2.0).collect();
        let ro = Rollout::new(PromptId(0), vec![0; len], old).unwrap();

        let g = gmpo_rollout_objective(&new, &ro, adv, &token).unwrap();
        let gu = gmpo_rollout_objective(&new, &ro, adv, &none).unwrap();
        let a = grpo_rollout_objective(&new, &ro, adv, &linear).unwrap();
        let au = grpo_rollout_objective(&new, &ro, adv, &none).unwrap();
        if g.value > gu.value + 1e-12 || a.value > au.value + 1e-12 {
            bad += 1;
        }
        for res in [&g, &a] {
            if res
                .clipped_flags
                .iter()
                .zip(&res.token_scores)
                .any(|(&f, &c)| f && c != 0.0)
            {
                bad += 1;
            }
        }
        let one_sided = d.iter().zip(&g.clipped_flags).all(|(&x, &f)| {
            f == if adv > 0.0 { x > eps } else { x < -eps }
        });
        if !one_sided {
            bad += 1;
        }
    }
    report(
        5,
        bad == 0,
        format!("{bad} violations over {PESSIMISM_INSTANCES} random rollouts"),
    );
}

struct CopyRuns {
    grpo: Vec<TrainSummary>,
    gmpo: Vec<TrainSummary>,
    seqclip: Vec<TrainSummary>,
    elapsed: Duration,
}

fn copy_runs() -> &'static CopyRuns {
    static RUNS: OnceLock<CopyRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t = Instant::now();
        let run = |k: ObjectiveKind| -> Vec<TrainSummary> {
            SEEDS
                .iter()
                .map(|&s| train(&load("copy.toml", k, s)).unwrap().summary)
                .collect()
        };
        let grpo = run(ObjectiveKind::Grpo);
        let gmpo = run(ObjectiveKind::Gmpo);
        let seqclip = run(ObjectiveKind::GmpoSeqClip);
        CopyRuns {
            grpo,
            gmpo,
            seqclip,
            elapsed: t.elapsed(),
        }
    })
}

fn wins(a: &[TrainSummary], b: &[TrainSummary], better: impl Fn(&TrainSummary, &TrainSummary) -> bool) -> usize {
    a.iter().zip(b).filter(|(x, y)| better(x, y)).count()
}

fn column(runs: &[TrainSummary], f: impl Fn(&TrainSummary) -> f64) -> String {
    runs.iter().map(|s| format!("{:.4}", f(s))).collect::<Vec<_>>().join(" ")
}

#[test]
fn criterion_6_ratio_envelope() {
    let r = copy_runs();
    let width = |s: &TrainSummary| s.mean_envelope_width;
    let vs_grpo = wins(&r.gmpo, &r.grpo, |m, g| width(m) < width(g));
    let vs_seq = wins(&r.gmpo, &r.seqclip, |m, s| width(m) < width(s));
    report(
        6,
        vs_grpo >= MIN_SEED_WINS && vs_seq >= MIN_SEED_WINS && r.elapsed < COPY_BUDGET,
        format!(
            "gmpo narrower than grpo in {vs_grpo}/5, than seq-clip in {vs_seq}/5 (widths gmpo [{}] grpo [{}] seqclip [{}]; runs took {:.1?})",
            column(&r.gmpo, width),
            column(&r.grpo, width),
            column(&r.seqclip, width),
            r.elapsed
        ),
    );
}

#[test]
fn criterion_7_entropy_and_kl() {
    let r = copy_runs();
    let ent = wins(&r.gmpo, &r.grpo, |m, g| m.final_round_entropy >= g.final_round_entropy);
    let kl = wins(&r.gmpo, &r.grpo, |m, g| m.final_round_kl_ref <= g.final_round_kl_ref);
    report(
        7,
        ent >= MIN_SEED_WINS && kl >= MIN_SEED_WINS,
        format!(
            "entropy gmpo>=grpo in {ent}/5 ([{}] vs [{}]), kl gmpo<=grpo in {kl}/5 ([{}] vs [{}])",
            column(&r.gmpo, |s| s.final_round_entropy),
            column(&r.grpo, |s| s.final_round_entropy),
            column(&r.gmpo, |s| s.final_round_kl_ref),
            column(&r.grpo, |s| s.final_round_kl_ref),
        ),
    );
}

#[test]
fn criterion_8_training_efficacy() {
    let parity: Vec<(ObjectiveKind, f64)> = [ObjectiveKind::Grpo, ObjectiveKind::Gmpo]
        .into_iter()
        .map(|k| (k, train(&load("parity.toml", k, 0)).unwrap().summary.final_mean_reward))
        .collect();
    let parity_ok = parity.iter().all(|&(_, r)| r >= PARITY_REWARD);
    let r = copy_runs();
    let copy = wins(&r.gmpo, &r.grpo, |m, g| m.final_reward_ma50 >= g.final_reward_ma50);
    report(
        8,
        parity_ok && copy >= MIN_SEED_WINS,
        format!(
            "parity final reward {}; copy MA50 gmpo>=grpo in {copy}/5 ([{}] vs [{}])",
            parity
                .iter()
                .map(|(k, r)| format!("{k} {r:.4}"))
                .collect::<Vec<_>>()
                .join(", "),
            column(&r.gmpo, |s| s.final_reward_ma50),
            column(&r.grpo, |s| s.final_reward_ma50),
        ),
    );
}

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "version = 1\n[train]\ngroup_size = 4\nprompts_per_round = 16\ninner_updates = 4\ntotal_rounds = 4\nstep_size = 100.0\n[task]\nname = \"copy\"\n",
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_gmpo");
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let train_out = dir.path().join(run).join("train");
        let ablate_out = dir.path().join(run).join("ablate");
        for args in [
            vec!["train", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", train_out.to_str().unwrap()],
            vec!["ablate", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", ablate_out.to_str().unwrap()],
        ] {
            let status = Command::new(bin).args(&args).output().unwrap().status;
            assert!(status.success(), "{args:?}");
        }
        let mut csvs = vec![std::fs::read(train_out.join("telemetry.csv")).unwrap()];
        for cell in gmpo::cli::ablation_cells() {
            csvs.push(std::fs::read(ablate_out.join(&cell.name).join("telemetry.csv")).unwrap());
        }
        outputs.push(csvs);
    }
    let identical = outputs[0] == outputs[1];
    report(
        9,
        identical,
        format!("{} telemetry CSVs compared byte for byte", outputs[0].len()),
    );
}
