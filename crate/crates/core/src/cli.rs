//! Command implementations behind the `grpo-lab` binary.
//!
//! Each command creates a fresh timestamped directory under the output
//! root and writes only into it. Everything except `timing.csv` is a pure
//! function of the inputs, so reruns reproduce it byte-for-byte.

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{LabError, Result};
use crate::metrics::{
    fmt_f64, read_metrics, write_checks, write_metrics, write_table, write_text, write_timing,
};
use crate::objectives::ObjectiveSpec;
use crate::policy::PolicyParams;
use crate::tasks::{make_kofv_task, mean_success_probability};
use crate::trainer::{run_training, RunRecord};
use crate::verify::{
    check_advantage_limits, check_decomposition_equivalence, check_degenerate_noop,
    check_gradient_variance, check_hard_question, check_objective_gradients,
    check_scaling_identity, full_suite, CheckReport, GradientObjective,
};

pub const CONFIG_FILE: &str = "config.ini";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CHECKS_FILE: &str = "checks.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const REPORT_FILE: &str = "report.csv";

/// Creates `root/<prefix>-<YYYYmmdd-HHMMSS>`, appending `-1`, `-2`, … when
/// that name is taken.
pub fn create_run_dir(root: &Path, prefix: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(root)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{prefix}-{stamp}");
    for n in 0.. {
        let name = if n == 0 {
            base.clone()
        } else {
            format!("{base}-{n}")
        };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub final_mean_reward: f64,
    pub initial_mean_reward: f64,
    pub total_rollouts: u64,
    pub steps: usize,
}

/// Trains `config` and writes snapshot, metrics, timing and summary into
/// `run_dir`, which must exist.
pub fn train_into(config: &RunConfig, run_dir: &Path) -> Result<TrainSummary> {
    config.validate()?;
    let task = config.task.build()?;
    write_text(&run_dir.join(CONFIG_FILE), &config.to_ini_string())?;
    let initial = mean_success_probability(&task, &task.uniform_policy())?;
    let outcome = run_training(&task, &config.trainer, &config.objective)?;
    let record = &outcome.record;
    write_metrics(&run_dir.join(METRICS_FILE), record)?;
    write_timing(&run_dir.join(TIMING_FILE), record)?;
    let summary = TrainSummary {
        run_dir: run_dir.to_path_buf(),
        final_mean_reward: record.final_exact_success().unwrap_or(initial),
        initial_mean_reward: initial,
        total_rollouts: record.total_rollouts(),
        steps: record.rows.len(),
    };
    write_table(
        &run_dir.join(SUMMARY_FILE),
        &[
            "final_mean_reward",
            "initial_mean_reward",
            "total_rollouts",
            "steps",
        ],
        &[vec![
            fmt_f64(summary.final_mean_reward),
            fmt_f64(summary.initial_mean_reward),
            summary.total_rollouts.to_string(),
            summary.steps.to_string(),
        ]],
    )?;
    Ok(summary)
}

pub fn cmd_train(config: &RunConfig, out_root: &Path) -> Result<TrainSummary> {
    config.validate()?;
    let dir = create_run_dir(out_root, "train")?;
    train_into(config, &dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckName {
    All,
    AdvantageLimits,
    ScalingIdentity,
    GradientVariance,
    HardQuestion,
    Decomposition,
    FiniteDifference,
    DegenerateNoop,
}

/// Optional overrides for a single check; unset values take the
/// acceptance parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckParams {
    pub p: Option<f64>,
    pub group_size: Option<usize>,
    pub num_groups: Option<usize>,
    pub adv_eps: Option<f64>,
    pub trials: Option<usize>,
    pub batch_sizes: Option<Vec<usize>>,
    pub schedule: Option<Vec<f64>>,
    pub objective: Option<String>,
    pub instances: Option<usize>,
    pub step: Option<f64>,
    pub seed: u64,
}

pub fn run_checks(check: CheckName, params: &CheckParams) -> Result<Vec<CheckReport>> {
    let seed = params.seed;
    let eps = params.adv_eps.unwrap_or(1e-8);
    Ok(match check {
        CheckName::All => full_suite(seed)?,
        CheckName::AdvantageLimits => {
            let g = params.group_size.unwrap_or(2);
            let n = params
                .num_groups
                .unwrap_or(if g == 2 { 100_000 } else { 10_000 });
            match params.p {
                Some(p) => vec![check_advantage_limits(p, g, n, eps, seed)?],
                None => [0.1, 0.5, 0.9]
                    .into_iter()
                    .enumerate()
                    .map(|(i, p)| check_advantage_limits(p, g, n, eps, seed + i as u64))
                    .collect::<Result<_>>()?,
            }
        }
        CheckName::ScalingIdentity => {
            let g = params.group_size.unwrap_or(1024);
            let n = params.num_groups.unwrap_or(10_000);
            let ps = params.p.map(|p| vec![p]).unwrap_or_else(|| vec![0.25, 0.5]);
            ps.into_iter()
                .enumerate()
                .map(|(i, p)| check_scaling_identity(p, g, 100_000, n, eps, 0.1, seed + i as u64))
                .collect::<Result<_>>()?
        }
        CheckName::GradientVariance => {
            let task = make_kofv_task(8, 2, 2, 16)?;
            let g = params.group_size.unwrap_or(2);
            let spec = if g == 2 {
                ObjectiveSpec::two_grpo()
            } else {
                ObjectiveSpec::grpo(g)
            };
            let sizes = params
                .batch_sizes
                .clone()
                .unwrap_or_else(|| vec![8, 32, 128, 512]);
            vec![check_gradient_variance(
                &task,
                &task.uniform_policy(),
                &spec,
                &sizes,
                params.trials.unwrap_or(500),
                0.1,
                seed,
            )?]
        }
        CheckName::HardQuestion => {
            let schedule = params
                .schedule
                .clone()
                .unwrap_or_else(|| vec![0.1, 0.2, 0.3, 0.4]);
            vec![check_hard_question(
                &schedule,
                params.trials.unwrap_or(100_000),
                seed,
            )?]
        }
        CheckName::Decomposition => {
            let task = make_kofv_task(4, 2, 2, 4)?;
            let g = params.group_size.unwrap_or(4);
            let q = params.num_groups.unwrap_or(4);
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let policy = PolicyParams::random(4, 2, 4, 1.0, &mut rng)?;
            vec![check_decomposition_equivalence(&task, &policy, q, g, seed)?]
        }
        CheckName::FiniteDifference => {
            let objectives = match &params.objective {
                Some(name) => vec![GradientObjective::parse(name).ok_or_else(|| {
                    LabError::config(
                        "objective",
                        format!("unknown objective {name:?} (vpg|grpo|grpo-ratio|two-grpo|dpo)"),
                    )
                })?],
                None => GradientObjective::ALL.to_vec(),
            };
            objectives
                .into_iter()
                .map(|o| {
                    check_objective_gradients(
                        o,
                        params.instances.unwrap_or(10),
                        params.step.unwrap_or(1e-5),
                        seed,
                    )
                })
                .collect::<Result<_>>()?
        }
        CheckName::DegenerateNoop => vec![check_degenerate_noop(seed)?],
    })
}

#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub run_dir: PathBuf,
    pub reports: Vec<CheckReport>,
}

impl VerifyOutcome {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(CheckReport::passed)
    }
}

pub fn cmd_verify(
    check: CheckName,
    params: &CheckParams,
    out_root: &Path,
) -> Result<VerifyOutcome> {
    let reports = run_checks(check, params)?;
    let dir = create_run_dir(out_root, "verify")?;
    write_checks(&dir.join(CHECKS_FILE), &reports)?;
    Ok(VerifyOutcome {
        run_dir: dir,
        reports,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    /// `Q = budget / G`, equal rollouts per step.
    BudgetMatched { budget: usize },
    /// Same `Q` for every group size.
    FixedPrompts { prompts_per_step: usize },
}

/// `(G, Q)` for every group size, validated before any training.
pub fn sweep_plan(groups: &[usize], mode: SweepMode) -> Result<Vec<(usize, usize)>> {
    if groups.is_empty() {
        return Err(LabError::config("groups", "need at least one group size"));
    }
    let mut sorted = groups.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    sorted
        .into_iter()
        .map(|g| {
            if g < 2 {
                return Err(LabError::config("groups", "group size must be ≥ 2"));
            }
            match mode {
                SweepMode::BudgetMatched { budget } => {
                    if budget % g != 0 || budget < g {
                        Err(LabError::config(
                            "budget",
                            format!("budget {budget} is not divisible by group size {g}"),
                        ))
                    } else {
                        Ok((g, budget / g))
                    }
                }
                SweepMode::FixedPrompts { prompts_per_step } => Ok((g, prompts_per_step)),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub run_dir: PathBuf,
    pub runs: Vec<(usize, usize, TrainSummary)>,
}

/// One run per group size under `root/sweep-<stamp>/G<g>` plus a
/// `comparison.csv` sorted by group size.
pub fn cmd_sweep(
    config: &RunConfig,
    groups: &[usize],
    mode: SweepMode,
    out_root: &Path,
) -> Result<SweepOutcome> {
    let plan = sweep_plan(groups, mode)?;
    let configs: Vec<RunConfig> = plan
        .iter()
        .map(|&(g, q)| {
            let mut c = config.clone();
            c.set_group_size(g);
            c.trainer.prompts_per_step = q;
            c.validate().map(|_| c)
        })
        .collect::<Result<_>>()?;
    let dir = create_run_dir(out_root, "sweep")?;
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for ((g, q), c) in plan.into_iter().zip(configs) {
        let name = format!("G{g}");
        let run_dir = dir.join(&name);
        std::fs::create_dir(&run_dir)?;
        let s = train_into(&c, &run_dir)?;
        rows.push(vec![
            g.to_string(),
            q.to_string(),
            fmt_f64(s.final_mean_reward),
            s.total_rollouts.to_string(),
            s.steps.to_string(),
            name,
        ]);
        runs.push((g, q, s));
    }
    write_table(
        &dir.join(COMPARISON_FILE),
        &[
            "group_size",
            "prompts_per_step",
            "final_mean_reward",
            "total_rollouts",
            "steps",
            "run",
        ],
        &rows,
    )?;
    Ok(SweepOutcome { run_dir: dir, runs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub final_mean_reward: f64,
    pub total_rollouts: u64,
    pub steps: usize,
    /// Rollouts relative to the first readable run.
    pub relative_budget: f64,
    /// Final reward minus the first readable run's.
    pub delta_reward: f64,
}

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub run_dir: PathBuf,
    pub rows: Vec<ReportRow>,
    /// Inputs that could not be read, with the reason.
    pub failures: Vec<(PathBuf, String)>,
}

fn metrics_path(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.join(METRICS_FILE)
    } else {
        input.to_path_buf()
    }
}

fn run_label(input: &Path) -> String {
    let base = if input.is_dir() {
        input
    } else {
        input.parent().unwrap_or(input)
    };
    base.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| base.display().to_string())
}

/// Tabulates existing runs without touching them. Unreadable inputs are
/// listed in `failures` and skipped.
pub fn cmd_report(inputs: &[PathBuf], out_root: &Path) -> Result<ReportOutcome> {
    if inputs.is_empty() {
        return Err(LabError::config("runs", "need at least one run directory"));
    }
    let mut records: Vec<(String, RunRecord)> = Vec::new();
    let mut failures = Vec::new();
    for input in inputs {
        let path = metrics_path(input);
        match read_metrics(&path) {
            Ok(r) => records.push((run_label(input), r)),
            Err(e) => failures.push((path, e.to_string())),
        }
    }
    let mut rows = Vec::new();
    if let Some((_, first)) = records.first() {
        let base_rollouts = first.total_rollouts() as f64;
        let base_reward = first.final_exact_success().unwrap_or(f64::NAN);
        for (run, rec) in &records {
            let reward = rec.final_exact_success().unwrap_or(f64::NAN);
            rows.push(ReportRow {
                run: run.clone(),
                final_mean_reward: reward,
                total_rollouts: rec.total_rollouts(),
                steps: rec.rows.len(),
                relative_budget: rec.total_rollouts() as f64 / base_rollouts,
                delta_reward: reward - base_reward,
            });
        }
    }
    let dir = create_run_dir(out_root, "report")?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.run.clone(),
                fmt_f64(r.final_mean_reward),
                r.total_rollouts.to_string(),
                r.steps.to_string(),
                fmt_f64(r.relative_budget),
                fmt_f64(r.delta_reward),
            ]
        })
        .collect();
    write_table(
        &dir.join(REPORT_FILE),
        &[
            "run",
            "final_mean_reward",
            "total_rollouts",
            "steps",
            "relative_budget",
            "delta_reward",
        ],
        &table,
    )?;
    Ok(ReportOutcome {
        run_dir: dir,
        rows,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_matched_plan() {
        assert_eq!(
            sweep_plan(&[16, 2], SweepMode::BudgetMatched { budget: 128 }).unwrap(),
            vec![(2, 64), (16, 8)]
        );
        let fixed = sweep_plan(
            &[2, 4, 8, 16],
            SweepMode::FixedPrompts {
                prompts_per_step: 32,
            },
        )
        .unwrap();
        let rollouts: Vec<usize> = fixed.iter().map(|(g, q)| g * q).collect();
        assert_eq!(rollouts, vec![64, 128, 256, 512]);
        let err = sweep_plan(&[3], SweepMode::BudgetMatched { budget: 128 }).unwrap_err();
        assert!(err.to_string().contains("not divisible"));
        assert!(sweep_plan(
            &[1],
            SweepMode::FixedPrompts {
                prompts_per_step: 4
            }
        )
        .is_err());
    }

    #[test]
    fn run_dirs_never_collide() {
        let root = tempfile::tempdir().unwrap();
        let a = create_run_dir(root.path(), "x").unwrap();
        let b = create_run_dir(root.path(), "x").unwrap();
        assert_ne!(a, b);
        assert!(a.is_dir() && b.is_dir());
    }
}
