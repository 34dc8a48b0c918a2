use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use grpo_lab::cli::{self, CheckName, CheckParams, SweepMode};
use grpo_lab::config::RunConfig;
use grpo_lab::LabError;

/// Tabular laboratory for group-relative policy optimization.
#[derive(Parser)]
#[command(name = "grpo-lab", version, about)]
struct Cli {
    /// Output root; each command writes into a fresh timestamped directory.
    #[arg(long, global = true, env = "GRPO_LAB_OUT")]
    out: Option<PathBuf>,

    /// Seed override (trainer seed for train/sweep, check seed for verify).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run statistical and numerical checks; exit 0 iff all pass.
    Verify {
        #[arg(value_enum, default_value = "all")]
        check: Check,
        #[arg(long)]
        p: Option<f64>,
        /// Group size.
        #[arg(long)]
        g: Option<usize>,
        /// Number of groups (or prompts per batch for decomposition).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        adv_eps: Option<f64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        batch_sizes: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        schedule: Option<Vec<f64>>,
        /// vpg | grpo | grpo-ratio | two-grpo | dpo
        #[arg(long)]
        objective: Option<String>,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        step: Option<f64>,
    },
    /// Train the same configuration at several group sizes.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
        groups: Vec<usize>,
        /// Rollouts per step; defaults to the config's Q·G.
        #[arg(long, conflicts_with = "fixed_q")]
        budget: Option<usize>,
        /// Hold Q fixed instead of Q·G.
        #[arg(long)]
        fixed_q: Option<usize>,
    },
    /// Tabulate finished runs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Check {
    All,
    AdvantageLimits,
    ScalingIdentity,
    GradientVariance,
    HardQuestion,
    Decomposition,
    FiniteDifference,
    DegenerateNoop,
}

impl From<Check> for CheckName {
    fn from(c: Check) -> Self {
        match c {
            Check::All => CheckName::All,
            Check::AdvantageLimits => CheckName::AdvantageLimits,
            Check::ScalingIdentity => CheckName::ScalingIdentity,
            Check::GradientVariance => CheckName::GradientVariance,
            Check::HardQuestion => CheckName::HardQuestion,
            Check::Decomposition => CheckName::Decomposition,
            Check::FiniteDifference => CheckName::FiniteDifference,
            Check::DegenerateNoop => CheckName::DegenerateNoop,
        }
    }
}

/// Error that maps to exit status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: LabError) -> anyhow::Error {
    match e {
        LabError::Config { .. } | LabError::InvalidArgument(_) | LabError::Unsupported(_) => {
            UsageError(e.to_string()).into()
        }
        other => other.into(),
    }
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    let mut config = RunConfig::from_ini_str(&text).map_err(usage)?;
    if let Some(s) = seed {
        config.trainer.seed = s;
    }
    Ok(config)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let root = |config: Option<&RunConfig>| {
        cli.out
            .clone()
            .or_else(|| config.map(|c| c.output_dir.clone()))
            .unwrap_or_else(|| PathBuf::from("runs"))
    };
    match cli.command {
        Command::Train { ref config } => {
            let config = load_config(config, cli.seed)?;
            let s = cli::cmd_train(&config, &root(Some(&config))).map_err(usage)?;
            println!("run directory:     {}", s.run_dir.display());
            println!("steps:             {}", s.steps);
            println!("total rollouts:    {}", s.total_rollouts);
            println!("initial mean reward: {:.6}", s.initial_mean_reward);
            println!("final mean reward:   {:.6}", s.final_mean_reward);
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            check,
            p,
            g,
            n,
            adv_eps,
            trials,
            ref batch_sizes,
            ref schedule,
            ref objective,
            instances,
            step,
        } => {
            let params = CheckParams {
                p,
                group_size: g,
                num_groups: n,
                adv_eps,
                trials,
                batch_sizes: batch_sizes.clone(),
                schedule: schedule.clone(),
                objective: objective.clone(),
                instances,
                step,
                seed: cli.seed.unwrap_or(0),
            };
            let outcome = cli::cmd_verify(check.into(), &params, &root(None)).map_err(usage)?;
            for r in &outcome.reports {
                print!("{}", r.summary());
            }
            let failed = outcome.reports.iter().filter(|r| !r.passed()).count();
            println!(
                "{} of {} checks passed; reports in {}",
                outcome.reports.len() - failed,
                outcome.reports.len(),
                outcome.run_dir.join(cli::CHECKS_FILE).display()
            );
            Ok(if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Sweep {
            ref config,
            ref groups,
            budget,
            fixed_q,
        } => {
            let config = load_config(config, cli.seed)?;
            let mode = match fixed_q {
                Some(q) => SweepMode::FixedPrompts {
                    prompts_per_step: q,
                },
                None => SweepMode::BudgetMatched {
                    budget: budget
                        .unwrap_or(config.trainer.prompts_per_step * config.trainer.group_size),
                },
            };
            let outcome =
                cli::cmd_sweep(&config, groups, mode, &root(Some(&config))).map_err(usage)?;
            println!(
                "{:>4} {:>6} {:>18} {:>14} {:>6}",
                "G", "Q", "final_mean_reward", "rollouts", "steps"
            );
            for (g, q, s) in &outcome.runs {
                println!(
                    "{g:>4} {q:>6} {:>18.6} {:>14} {:>6}",
                    s.final_mean_reward, s.total_rollouts, s.steps
                );
            }
            println!(
                "comparison: {}",
                outcome.run_dir.join(cli::COMPARISON_FILE).display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { ref runs } => {
            let outcome = cli::cmd_report(runs, &root(None)).map_err(usage)?;
            println!(
                "{:<32} {:>18} {:>14} {:>6} {:>8} {:>12}",
                "run", "final_mean_reward", "rollouts", "steps", "budget", "delta"
            );
            for r in &outcome.rows {
                println!(
                    "{:<32} {:>18.6} {:>14} {:>6} {:>8.3} {:>+12.6}",
                    r.run,
                    r.final_mean_reward,
                    r.total_rollouts,
                    r.steps,
                    r.relative_budget,
                    r.delta_reward
                );
            }
            for (path, reason) in &outcome.failures {
                eprintln!("skipped {}: {reason}", path.display());
            }
            println!(
                "report: {}",
                outcome.run_dir.join(cli::REPORT_FILE).display()
            );
            Ok(if outcome.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let code = if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            };
            eprintln!("error: {:#}", e);
            ExitCode::from(code)
        }
    }
}
