//! Command-line front end.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage, 3 configuration or
//! parse error, 4 refused size, 5 i/o, 6 numerical failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::gradsuite::{gradient_suite, saint_suite, SuiteReport};
use super::run::{run_experiment, run_offline, sweep, SweepPlan};
use super::{ExperimentSpec, KvConfig, PolicyClass};
use crate::compute::GradCheckOptions;
use crate::cone::{generate_offline_dataset, oracle_optimal_return, ConeConfig, ConeInstance};
use crate::error::Error;
use crate::policy::{load_policy, SaintConfig};
use crate::rl::evaluate_policy;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_REFUSED: i32 = 4;
pub const EXIT_IO: i32 = 5;
pub const EXIT_NUMERIC: i32 = 6;

/// Gradient-suite pass threshold on the maximum relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } => EXIT_CONFIG,
        Error::Refused(_) => EXIT_REFUSED,
        Error::Io { .. } => EXIT_IO,
        Error::NonFinite(_) | Error::Determinism { .. } => EXIT_NUMERIC,
        Error::Dimension { .. } | Error::Contract(_) => EXIT_OTHER,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "saint",
    version,
    about = "Set-attention policies on combinatorial navigation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// `key=value` override applied after the file; repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn kv(&self) -> crate::Result<KvConfig> {
        let mut kv = match &self.config {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::default(),
        };
        for o in &self.overrides {
            kv.set(o)?;
        }
        Ok(kv)
    }

    fn spec(&self) -> crate::Result<ExperimentSpec> {
        ExperimentSpec::from_kv(&self.kv()?)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every seed of one experiment and write its run directory.
    Train(ConfigArgs),
    /// Run a grid of experiments under the configuration's output directory.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Grid axis values for env.D.
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4, 7])]
        dims: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0f64, 0.25, 1.0])]
        pits: Vec<f64>,
        /// Policy classes; all five by default.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
        /// SAINT blocks × heads grid on the configured environment
        /// (L ∈ {1,3}, H ∈ {1,4}) instead of the environment grid.
        #[arg(long)]
        depth_heads: bool,
    },
    /// Print the optimal expected return of the configured environment.
    Oracle(ConfigArgs),
    /// Log transitions from an ε-uniform mixture of a behavior policy.
    GenDataset {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50_000)]
        transitions: usize,
        #[arg(long, default_value_t = 0.3)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Behavior checkpoint; a freshly initialized policy of the
        /// configured class otherwise.
        #[arg(long)]
        behavior: Option<PathBuf>,
    },
    /// Offline AWR on a dataset, one policy per seed.
    TrainOffline {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        dataset: PathBuf,
    },
    /// Greedy and stochastic return of a checkpoint.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every operation and policy loss.
    GradCheck {
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print every entry, not just the summary.
        #[arg(short, long)]
        verbose: bool,
    },
}

/// Environment section of a configuration; the policy section may be
/// absent.
fn env_from_kv(kv: &KvConfig) -> crate::Result<ConeConfig> {
    let mut env = ConeConfig::new(
        kv.require("env.D")?,
        kv.require("env.M")?,
        kv.require("env.pit_fraction")?,
        kv.get_or("env.seed", 0)?,
    );
    env.max_steps = kv.get_or("env.max_steps", env.max_steps)?;
    env.goal_bonus = kv.get_or("env.goal_bonus", env.goal_bonus)?;
    env.discount = kv.get_or("train.discount", env.discount)?;
    env.validate()?;
    Ok(env)
}

/// Runs the CLI with `argv` (program name first), writing to the given
/// streams. Returns the process exit code.
pub fn run_with(argv: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(argv: &[String]) -> i32 {
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> crate::Result<i32> {
    let io = |e: std::io::Error| Error::io(Path::new("<stdout>"), e);
    match cmd {
        Command::Train(args) => {
            let spec = args.spec()?;
            let res = run_experiment(&spec, &mut |line| {
                let _ = writeln!(err, "{line}");
            })?;
            writeln!(
                out,
                "{}: final mean {:?} ± {:?} over {} seeds -> {}",
                spec.policy.class,
                res.summary.mean,
                res.summary.std,
                res.runs.len(),
                res.dir.display()
            )
            .map_err(io)?;
        }
        Command::Sweep {
            config,
            dims,
            pits,
            classes,
            depth_heads,
        } => {
            let spec = config.spec()?;
            let mut plan = if depth_heads {
                SweepPlan::depth_heads(spec)
            } else {
                SweepPlan {
                    dims,
                    pit_fractions: pits,
                    ..SweepPlan::desk_scale(spec)
                }
            };
            if !classes.is_empty() {
                plan.classes = classes
                    .iter()
                    .map(|c| c.parse::<PolicyClass>())
                    .collect::<crate::Result<_>>()?;
            }
            let results = sweep(&plan, &mut |line| {
                let _ = writeln!(err, "{line}");
            })?;
            for r in results {
                writeln!(
                    out,
                    "{}: {:?} ± {:?}",
                    r.row.label, r.row.final_mean, r.row.final_std
                )
                .map_err(io)?;
            }
        }
        Command::Oracle(args) => {
            let env = env_from_kv(&args.kv()?)?;
            let value = oracle_optimal_return(&ConeInstance::build(env)?)?;
            writeln!(out, "{value:?}").map_err(io)?;
        }
        Command::GenDataset {
            config,
            out: path,
            transitions,
            epsilon,
            seed,
            behavior,
        } => {
            let spec = config.spec()?;
            let policy = match behavior {
                Some(p) => load_policy(&p)?,
                None => spec.build_policy(seed)?,
            };
            let instance = ConeInstance::build(spec.env.clone())?;
            let ds = generate_offline_dataset(
                &instance,
                policy.as_ref(),
                epsilon,
                transitions,
                seed,
                &path,
            )?;
            writeln!(
                out,
                "{} transitions, {} episodes, behavior mean return {:?} -> {}",
                ds.transitions.len(),
                ds.episode_ranges().len(),
                ds.mean_episode_return(),
                path.display()
            )
            .map_err(io)?;
        }
        Command::TrainOffline { config, dataset } => {
            let spec = config.spec()?;
            let res = run_offline(&spec, &dataset, &mut |line| {
                let _ = writeln!(err, "{line}");
            })?;
            writeln!(
                out,
                "{}: evaluated mean {:?} ± {:?} over {} seeds -> {}",
                spec.policy.class,
                res.summary.mean,
                res.summary.std,
                res.runs.len(),
                res.dir.display()
            )
            .map_err(io)?;
        }
        Command::Eval {
            config,
            checkpoint,
            episodes,
            seed,
        } => {
            let env = env_from_kv(&config.kv()?)?;
            let policy = load_policy(&checkpoint)?;
            let instance = ConeInstance::build(env)?;
            let greedy = evaluate_policy(&instance, policy.as_ref(), episodes, true, seed)?;
            let stochastic = evaluate_policy(&instance, policy.as_ref(), episodes, false, seed)?;
            writeln!(
                out,
                "greedy {:?} (goal rate {:?})",
                greedy.mean_return, greedy.goal_rate
            )
            .map_err(io)?;
            writeln!(
                out,
                "stochastic {:?} (goal rate {:?})",
                stochastic.mean_return, stochastic.goal_rate
            )
            .map_err(io)?;
        }
        Command::GradCheck { h, seed, verbose } => {
            let opts = GradCheckOptions {
                h,
                seed,
                ..GradCheckOptions::default()
            };
            let mut report = gradient_suite(&opts)?;
            let mut default = SuiteReport::default();
            saint_suite(&SaintConfig::new(vec![2; 4], 2), &opts, &mut default)?;
            for e in default.entries {
                report.push(format!("default-{}", e.name), e.report);
            }
            if verbose {
                for e in &report.entries {
                    writeln!(out, "{:<40} {:.3e}", e.name, e.report.max_rel_error).map_err(io)?;
                }
            }
            let worst = report.worst().map_or("-", |e| e.name.as_str());
            writeln!(
                out,
                "checked {} coordinates in {} losses; max relative error {:.3e} ({worst})",
                report.coordinates_checked,
                report.entries.len(),
                report.max_rel_error
            )
            .map_err(io)?;
            if !(report.max_rel_error < GRAD_TOLERANCE) {
                writeln!(
                    err,
                    "gradient check failed: {:.3e} >= {GRAD_TOLERANCE:e}",
                    report.max_rel_error
                )
                .map_err(io)?;
                return Ok(EXIT_NUMERIC);
            }
        }
    }
    Ok(0)
}
