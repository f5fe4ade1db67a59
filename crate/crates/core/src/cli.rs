//! `gmpo` command-line interface.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 a check failed,
//! 3 runtime abort. Relative `--out` paths are resolved against
//! `$GMPO_OUT_ROOT` when it is set.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{self, ConfigFile, Overrides};
use crate::error::{Error, Result};
use crate::oracle;
use crate::rollout::{ClipConfig, ObjectiveKind};
use crate::telemetry;
use crate::trainer::{self, TrainConfig, TrainOutcome, TrainSummary};

pub const OUT_ROOT_VAR: &str = "GMPO_OUT_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;
pub const EXIT_ABORT: i32 = 3;

pub const TELEMETRY_FILE: &str = "telemetry.csv";
pub const CHECKPOINT_FILE: &str = "policy.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ABLATION_TABLE: &str = "ablation.csv";

/// Log-space thresholds of the clip-threshold sweep; `None` is unbounded.
pub const THRESHOLD_SWEEP: [Option<f64>; 4] = [Some(0.2), Some(0.4), Some(0.8), None];

#[derive(Debug, Parser)]
#[command(name = "gmpo", version, about = "GMPO / GRPO policy-optimization laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one policy and write telemetry, checkpoint and summary.
    Train(TrainArgs),
    /// Run the objective ablation and the clip-threshold sweep.
    Ablate(AblateArgs),
    /// Compare analytic gradients against central finite differences.
    GradCheck(CheckArgs),
    /// Check that the geometric-mean objective never exceeds the arithmetic one in magnitude.
    AmgmCheck(CheckArgs),
    /// Turn telemetry CSVs into two-column plot data.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// grpo | gmpo | gmpo_noclip | gmpo_seqclip | gmpo_nonorm
    #[arg(long, value_parser = parse_objective)]
    pub objective: Option<ObjectiveKind>,
    /// Lower clip threshold L = ln(eps1), log space.
    #[arg(long, allow_negative_numbers = true)]
    pub clip_lower: Option<f64>,
    /// Upper clip threshold U = ln(eps2), log space.
    #[arg(long, allow_negative_numbers = true)]
    pub clip_upper: Option<f64>,
    /// GRPO only: linear clip range (1 - eps, 1 + eps).
    #[arg(long, conflicts_with_all = ["clip_lower", "clip_upper"])]
    pub grpo_epsilon: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out/train")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out/ablate")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Number of random instances (default 100 for grad-check, 10000 for amgm-check).
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories (containing telemetry.csv) or CSV files.
    #[arg(long = "in", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// Metric column; repeat for several. Defaults to every metric.
    #[arg(long)]
    pub metric: Vec<String>,
    /// Trailing moving-average window; 1 leaves the series unchanged.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub smooth: u64,
    #[arg(long, default_value = "out/report")]
    pub out: PathBuf,
}

fn parse_objective(s: &str) -> std::result::Result<ObjectiveKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_ABORT,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::GradCheck(a) => cmd_grad_check(&a),
        Command::AmgmCheck(a) => cmd_amgm_check(&a),
        Command::Report(a) => cmd_report(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Applies `$GMPO_OUT_ROOT` to a relative output path.
pub fn resolve_out(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_VAR) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidValue(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains `cfg` and writes the full output set into `dir`.
pub fn train_into(cfg: &TrainConfig, dir: &Path) -> Result<TrainOutcome> {
    create_dir(dir)?;
    config::write_resolved(cfg, dir)?;
    let outcome = trainer::train(cfg)?;
    telemetry::write_csv(&outcome.telemetry, &dir.join(TELEMETRY_FILE))?;
    outcome
        .params
        .write_checkpoint(&dir.join(CHECKPOINT_FILE), cfg.seed)?;
    write_json(&outcome.summary, &dir.join(SUMMARY_FILE))?;
    Ok(outcome)
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let file = ConfigFile::load(&a.config)?;
    let cfg = file.resolve(&Overrides {
        objective: a.objective,
        clip_lower: a.clip_lower,
        clip_upper: a.clip_upper,
        grpo_epsilon: a.grpo_epsilon,
        seed: a.seed,
    })?;
    let out = resolve_out(&a.out);
    let outcome = train_into(&cfg, &out)?;
    let s = &outcome.summary;
    println!(
        "{} on {:?}: {} updates, final reward {:.4}, reward MA50 {:.4}, greedy pass@1 {:.4}, mean envelope {:.4} -> {}",
        s.objective,
        cfg.task.name,
        s.updates,
        s.final_mean_reward,
        s.final_reward_ma50,
        s.greedy_pass_at_1,
        s.mean_envelope_width,
        out.display()
    );
    Ok(EXIT_OK)
}

/// One run of the ablation grid.
#[derive(Debug, Clone)]
pub struct AblationCell {
    /// Path relative to the ablation root, e.g. `objectives/gmpo`.
    pub name: String,
    pub objective: ObjectiveKind,
    pub clip: ClipConfig,
}

fn threshold_cell_name(eps: Option<f64>) -> String {
    match eps {
        Some(e) => format!("thresholds/clip_{e}"),
        None => "thresholds/clip_inf".into(),
    }
}

/// The five objective cells followed by the four threshold cells. The
/// threshold cell equal to the default GMPO cell is listed but shares its run.
pub fn ablation_cells() -> Vec<AblationCell> {
    let mut cells: Vec<AblationCell> = ObjectiveKind::ALL
        .into_iter()
        .map(|k| AblationCell {
            name: format!("objectives/{k}"),
            objective: k,
            clip: k.default_clip(),
        })
        .collect();
    for eps in THRESHOLD_SWEEP {
        cells.push(AblationCell {
            name: threshold_cell_name(eps),
            objective: ObjectiveKind::Gmpo,
            clip: eps.map_or_else(ClipConfig::none, ClipConfig::symmetric_log),
        });
    }
    cells
}

#[derive(Debug, Serialize)]
struct AblationRow<'a> {
    cell: &'a str,
    objective: ObjectiveKind,
    mode: String,
    lower_log: f64,
    upper_log: f64,
    final_mean_reward: f64,
    final_reward_ma50: f64,
    greedy_pass_at_1: f64,
    mean_envelope_width: f64,
    run_ratio_log_min: f64,
    run_ratio_log_max: f64,
    final_round_entropy: f64,
    final_round_kl_ref: f64,
    mean_clip_fraction: f64,
}

fn run_extremes(outcome: &TrainOutcome) -> (f64, f64) {
    outcome.telemetry.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        (lo.min(r.ratio_log_min), hi.max(r.ratio_log_max))
    })
}

fn copy_run(from: &Path, to: &Path) -> Result<()> {
    create_dir(to)?;
    for f in [config::RESOLVED_FILE, TELEMETRY_FILE, CHECKPOINT_FILE, SUMMARY_FILE] {
        fs::copy(from.join(f), to.join(f)).map_err(|e| Error::io(to.join(f), e))?;
    }
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<i32> {
    let file = ConfigFile::load(&a.config)?;
    let base = file.resolve(&Overrides {
        seed: a.seed,
        ..Default::default()
    })?;
    let root = resolve_out(&a.out);
    create_dir(&root)?;
    config::write_resolved(&base, &root)?;

    let cells = ablation_cells();
    // A threshold cell identical to an objective cell reuses that run.
    let source: Vec<Option<usize>> = cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            cells[..i]
                .iter()
                .position(|o| o.objective == c.objective && o.clip == c.clip)
        })
        .collect();
    let configs: Vec<TrainConfig> = cells
        .iter()
        .map(|c| {
            let cfg = TrainConfig {
                objective: c.objective,
                clip: c.clip,
                ..base.clone()
            };
            cfg.validate().map(|_| cfg)
        })
        .collect::<Result<_>>()?;
    let runs: Vec<Option<TrainOutcome>> = cells
        .par_iter()
        .zip(&configs)
        .zip(&source)
        .map(|((c, cfg), src)| match src {
            Some(_) => Ok(None),
            None => train_into(cfg, &root.join(&c.name)).map(Some),
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut outcomes: Vec<&TrainOutcome> = Vec::new();
    for (i, c) in cells.iter().enumerate() {
        let outcome = match source[i] {
            Some(j) => {
                copy_run(&root.join(&cells[j].name), &root.join(&c.name))?;
                runs[j].as_ref().expect("source cells always run")
            }
            None => runs[i].as_ref().expect("non-shared cells run"),
        };
        outcomes.push(outcome);
        let s: &TrainSummary = &outcome.summary;
        let (lo, hi) = run_extremes(outcome);
        rows.push(AblationRow {
            cell: &c.name,
            objective: c.objective,
            mode: c.clip.mode.to_string(),
            lower_log: c.clip.lower_log,
            upper_log: c.clip.upper_log,
            final_mean_reward: s.final_mean_reward,
            final_reward_ma50: s.final_reward_ma50,
            greedy_pass_at_1: s.greedy_pass_at_1,
            mean_envelope_width: s.mean_envelope_width,
            run_ratio_log_min: lo,
            run_ratio_log_max: hi,
            final_round_entropy: s.final_round_entropy,
            final_round_kl_ref: s.final_round_kl_ref,
            mean_clip_fraction: s.mean_clip_fraction,
        });
    }

    let table = root.join(ABLATION_TABLE);
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&table)
        .map_err(|e| Error::Parse {
            path: table.clone(),
            message: e.to_string(),
        })?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Parse {
            path: table.clone(),
            message: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io(&table, e))?;

    println!(
        "{:<24} {:>8} {:>8} {:>8} {:>9} {:>8} {:>9} {:>8}",
        "cell", "reward", "ma50", "pass@1", "envelope", "entropy", "kl_ref", "clipped"
    );
    for r in &rows {
        println!(
            "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>8.4} {:>9.5} {:>8.4}",
            r.cell,
            r.final_mean_reward,
            r.final_reward_ma50,
            r.greedy_pass_at_1,
            r.mean_envelope_width,
            r.final_round_entropy,
            r.final_round_kl_ref,
            r.mean_clip_fraction
        );
    }
    let find = |k: ObjectiveKind| cells.iter().position(|c| c.name == format!("objectives/{k}"));
    if let (Some(seq), Some(tok)) = (find(ObjectiveKind::GmpoSeqClip), find(ObjectiveKind::Gmpo)) {
        let (slo, shi) = run_extremes(outcomes[seq]);
        let (tlo, thi) = run_extremes(outcomes[tok]);
        println!(
            "seq-clip envelope [{slo:.4}, {shi:.4}] {} token-clip envelope [{tlo:.4}, {thi:.4}]",
            if slo <= tlo && shi >= thi { "contains" } else { "does not contain" }
        );
    }
    println!("wrote {}", table.display());
    Ok(EXIT_OK)
}

fn require_instances(n: Option<usize>, default: usize) -> Result<usize> {
    match n.unwrap_or(default) {
        0 => Err(Error::InvalidArgument("--instances must be at least 1".into())),
        n => Ok(n),
    }
}

fn cmd_grad_check(a: &CheckArgs) -> Result<i32> {
    let n = require_instances(a.instances, 100)?;
    let sweep = oracle::grad_check_sweep(n, a.seed, oracle::DEFAULT_FD_STEP)?;
    println!(
        "grad-check: {n} instances, seed {}, max relative error {:.3e} (tolerance {:e}), clipping active in {:.0}% of instances",
        a.seed,
        sweep.max_rel_error,
        oracle::GRAD_TOLERANCE,
        100.0 * sweep.clipping_fraction
    );
    if let Some(w) = &sweep.worst {
        println!(
            "worst instance: {} at (bucket {}, token {})",
            w.instance, w.worst_parameter.0, w.worst_parameter.1
        );
    }
    if sweep.passed() {
        println!("PASS");
        Ok(EXIT_OK)
    } else {
        for f in &sweep.failures {
            println!(
                "FAIL {}",
                serde_json::to_string(f).unwrap_or_else(|_| format!("{f:?}"))
            );
        }
        println!("reproduce with: gmpo grad-check --instances {n} --seed {}", a.seed);
        Ok(EXIT_CHECK_FAILED)
    }
}

fn cmd_amgm_check(a: &CheckArgs) -> Result<i32> {
    let n = require_instances(a.instances, 10_000)?;
    let report = oracle::amgm_sweep(n, a.seed)?;
    println!(
        "amgm-check: {n} instances, seed {}, {} violations, worst margin |J_grpo|-|J_gmpo| = {:.3e}, max forced-equal gap {:.3e}",
        a.seed,
        report.violations.len(),
        report.worst_margin,
        report.max_equality_gap
    );
    if report.passed() {
        println!("PASS");
        Ok(EXIT_OK)
    } else {
        for v in report.violations.iter().take(5) {
            println!(
                "FAIL {}",
                serde_json::to_string(v).unwrap_or_else(|_| format!("{v:?}"))
            );
        }
        println!("reproduce with: gmpo amgm-check --instances {n} --seed {}", a.seed);
        Ok(EXIT_CHECK_FAILED)
    }
}

/// Trailing moving average; the first `w - 1` points average the shorter
/// prefix available.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    if w == 1 {
        return values.to_vec();
    }
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

fn run_label(input: &Path, index: usize, taken: &mut Vec<String>) -> String {
    let dir = if input.extension().is_some_and(|e| e == "csv") {
        input.parent().unwrap_or(Path::new(""))
    } else {
        input
    };
    let mut label = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    if label.is_empty() || label == "." {
        label = format!("run{index}");
    }
    if taken.contains(&label) {
        label = format!("{label}_{index}");
    }
    taken.push(label.clone());
    label
}

fn write_dat(path: &Path, columns: &[&[f64]]) -> Result<()> {
    let mut text = String::new();
    for i in 0..columns[0].len() {
        text.push_str(&i.to_string());
        for c in columns {
            text.push(' ');
            text.push_str(&format!("{:?}", c[i]));
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_report(a: &ReportArgs) -> Result<i32> {
    let out = resolve_out(&a.out);
    create_dir(&out)?;
    let window = a.smooth as usize;
    let mut taken = Vec::new();
    let mut written = 0usize;
    for (index, input) in a.inputs.iter().enumerate() {
        let csv_path = if input.is_dir() {
            input.join(TELEMETRY_FILE)
        } else {
            input.clone()
        };
        let (header, rows) = telemetry::read_columns(&csv_path)?;
        let metrics: Vec<String> = if a.metric.is_empty() {
            header
                .iter()
                .filter(|h| *h != "round" && *h != "update")
                .cloned()
                .collect()
        } else {
            a.metric.clone()
        };
        let column = |name: &str| -> Result<Vec<f64>> {
            let j = header.iter().position(|h| h == name).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "{}: no column {name:?}; available: {}",
                    csv_path.display(),
                    header.join(", ")
                ))
            })?;
            Ok(rows.iter().map(|r| r[j]).collect())
        };
        let label = run_label(input, index, &mut taken);
        for m in &metrics {
            let series = moving_average(&column(m)?, window);
            write_dat(&out.join(format!("{label}.{m}.dat")), &[&series])?;
            written += 1;
        }
        if metrics.iter().any(|m| m.starts_with("ratio_log_")) {
            let lo = moving_average(&column("ratio_log_min")?, window);
            let hi = moving_average(&column("ratio_log_max")?, window);
            write_dat(&out.join(format!("{label}.ratio_envelope.dat")), &[&lo, &hi])?;
            written += 1;
        }
    }
    println!("wrote {written} data files to {}", out.display());
    Ok(EXIT_OK)
}
