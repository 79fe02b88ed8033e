//! Seeded runs, sweeps and run directories.
//!
//! A run directory holds `config.txt`, one `metrics_seed{s}.csv`,
//! `losses_seed{s}.csv` and `checkpoint_seed{s}.txt` per seed, and
//! `summary.csv`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use super::metrics::{
    aggregate, read_metrics, write_summary, MetricsRow, MetricsWriter, SeedRun, Summary, SummaryRow,
};
use super::{ExperimentSpec, KvConfig, PolicyClass};
use crate::cone::{read_dataset, ConeInstance};
use crate::error::{Error, Result};
use crate::policy::save_policy;
use crate::rl::{evaluate_policy, train_offline, train_online, LossReport, Objective};

#[derive(Clone, Debug)]
pub struct RunResult {
    pub spec: ExperimentSpec,
    pub dir: PathBuf,
    pub runs: Vec<SeedRun>,
    pub summary: Summary,
    pub row: SummaryRow,
}

pub fn config_path(dir: &Path) -> PathBuf {
    dir.join("config.txt")
}

pub fn metrics_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("metrics_seed{seed}.csv"))
}

pub fn checkpoint_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("checkpoint_seed{seed}.txt"))
}

fn losses_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("losses_seed{seed}.csv"))
}

fn summary_path(dir: &Path) -> PathBuf {
    dir.join("summary.csv")
}

fn write_losses(path: &Path, reports: &[LossReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    for r in reports {
        w.serialize(r)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn summary_row(spec: &ExperimentSpec, label: &str, params: usize, s: &Summary) -> SummaryRow {
    SummaryRow {
        label: label.to_owned(),
        class: spec.policy.class.to_string(),
        dims: spec.env.dims,
        size: spec.env.size,
        pit_fraction: spec.env.pit_fraction,
        blocks: if spec.policy.class.is_saint() {
            spec.policy.blocks
        } else {
            0
        },
        heads: if spec.policy.class.is_saint() {
            spec.policy.heads
        } else {
            0
        },
        params,
        seeds: s.seed_means.len(),
        final_mean: s.mean,
        final_std: s.std,
    }
}

fn prepare_dir(spec: &ExperimentSpec) -> Result<PathBuf> {
    let dir = spec.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let cfg = config_path(&dir);
    fs::write(&cfg, spec.render()).map_err(|e| Error::io(&cfg, e))?;
    Ok(dir)
}

/// Trains every seed of `spec` online and writes its run directory.
/// `log` receives one line per finished seed.
pub fn run_experiment(spec: &ExperimentSpec, log: &mut dyn FnMut(&str)) -> Result<RunResult> {
    spec.validate()?;
    if spec.train.objective == Objective::OfflineAwr {
        return Err(Error::Config(
            "train.objective = offline_awr needs a dataset; use train-offline".into(),
        ));
    }
    let instance = ConeInstance::build(spec.env.clone())?;
    let dir = prepare_dir(spec)?;
    let mut runs = Vec::with_capacity(spec.seeds.len());
    let mut params = 0;
    for &seed in &spec.seeds {
        let mut policy = spec.build_policy(seed)?;
        params = policy.num_params();
        let cfg = crate::rl::TrainConfig {
            seed,
            ..spec.train.clone()
        };
        let mpath = metrics_path(&dir, seed);
        let file = File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut writer = MetricsWriter::new(BufWriter::new(file), &mpath)?;
        let mut rows = Vec::new();
        let outcome = train_online(&instance, policy.as_mut(), &cfg, &mut |ep| {
            let row = MetricsRow {
                seed,
                episode: ep.episode,
                env_steps: ep.env_steps,
                episode_return: ep.episode_return,
                wall_clock_s: ep.wall_clock_s,
            };
            writer.push(&row)?;
            rows.push(row);
            Ok(())
        })?;
        writer.finish()?;
        write_losses(&losses_path(&dir, seed), &outcome.updates)?;
        save_policy(policy.as_ref(), &checkpoint_path(&dir, seed))?;
        let run = SeedRun {
            identity: spec.identity(),
            env_identity: spec.env_identity(),
            seed,
            rows,
        };
        log(&format!(
            "{} seed {seed}: {} episodes, {} steps, final-window mean {:.4}, {:.1}s",
            spec.policy.class,
            run.rows.len(),
            outcome.env_steps,
            run.final_window_mean().unwrap_or(f64::NAN),
            run.total_wall_clock()
        ));
        runs.push(run);
    }
    finish(spec, dir, runs, params)
}

fn finish(
    spec: &ExperimentSpec,
    dir: PathBuf,
    runs: Vec<SeedRun>,
    params: usize,
) -> Result<RunResult> {
    let summary = aggregate(&runs)?;
    let label = dir.file_name().map_or_else(
        || spec.policy.class.to_string(),
        |n| n.to_string_lossy().into_owned(),
    );
    let row = summary_row(spec, &label, params, &summary);
    write_summary(&summary_path(&dir), std::slice::from_ref(&row))?;
    Ok(RunResult {
        spec: spec.clone(),
        dir,
        runs,
        summary,
        row,
    })
}

/// Number of evaluation episodes per seed in [`run_offline`].
pub const OFFLINE_EVAL_EPISODES: usize = 100;

/// Trains every seed offline on a dataset, then evaluates each trained
/// policy by sampling. The metrics file of a seed lists its evaluation
/// episodes.
pub fn run_offline(
    spec: &ExperimentSpec,
    dataset_path: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<RunResult> {
    spec.validate()?;
    let dataset = read_dataset(dataset_path)?;
    if dataset.header.config != spec.env {
        return Err(Error::Refused(format!(
            "dataset {} was logged on a different environment",
            dataset_path.display()
        )));
    }
    let instance = ConeInstance::build(spec.env.clone())?;
    let dir = prepare_dir(spec)?;
    let mut runs = Vec::new();
    let mut params = 0;
    for &seed in &spec.seeds {
        let mut policy = spec.build_policy(seed)?;
        params = policy.num_params();
        let cfg = crate::rl::TrainConfig {
            seed,
            objective: Objective::OfflineAwr,
            ..spec.train.clone()
        };
        let start = std::time::Instant::now();
        let (_, reports) = train_offline(&dataset, policy.as_mut(), &cfg, &mut |_| Ok(()))?;
        let report = evaluate_policy(
            &instance,
            policy.as_ref(),
            OFFLINE_EVAL_EPISODES,
            false,
            seed,
        )?;
        let elapsed = start.elapsed().as_secs_f64();
        let rows: Vec<MetricsRow> = report
            .returns
            .iter()
            .enumerate()
            .map(|(i, &r)| MetricsRow {
                seed,
                episode: i,
                env_steps: 0,
                episode_return: r,
                wall_clock_s: elapsed,
            })
            .collect();
        super::metrics::write_metrics(&metrics_path(&dir, seed), &rows)?;
        write_losses(&losses_path(&dir, seed), &reports)?;
        save_policy(policy.as_ref(), &checkpoint_path(&dir, seed))?;
        log(&format!(
            "{} seed {seed}: evaluated mean {:.4} (dataset mean {:.4})",
            spec.policy.class,
            report.mean_return,
            dataset.mean_episode_return()
        ));
        runs.push(SeedRun {
            identity: spec.identity(),
            env_identity: spec.env_identity(),
            seed,
            rows,
        });
    }
    // Every evaluation episode counts toward the final mean.
    let summary = {
        let means: Vec<f64> = runs
            .iter()
            .map(|r| r.rows.iter().map(|x| x.episode_return).sum::<f64>() / r.rows.len() as f64)
            .collect();
        let n = means.len() as f64;
        let mean = means.iter().sum::<f64>() / n;
        let std = (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n).sqrt();
        Summary {
            identity: spec.identity(),
            seed_means: means,
            mean,
            std,
        }
    };
    let label = dir.file_name().map_or_else(
        || "offline".to_owned(),
        |n| n.to_string_lossy().into_owned(),
    );
    let row = summary_row(spec, &label, params, &summary);
    write_summary(&summary_path(&dir), std::slice::from_ref(&row))?;
    Ok(RunResult {
        spec: spec.clone(),
        dir,
        runs,
        summary,
        row,
    })
}

/// Reloads the seeds of a finished run directory.
pub fn load_run(dir: &Path) -> Result<(ExperimentSpec, Vec<SeedRun>)> {
    let spec = ExperimentSpec::from_kv(&KvConfig::load(&config_path(dir))?)?;
    let runs = spec
        .seeds
        .iter()
        .map(|&seed| {
            Ok(SeedRun {
                identity: spec.identity(),
                env_identity: spec.env_identity(),
                seed,
                rows: read_metrics(&metrics_path(dir, seed))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((spec, runs))
}

/// A cross-product of environments and policy classes, optionally with a
/// SAINT blocks × heads grid.
#[derive(Clone, Debug)]
pub struct SweepPlan {
    pub base: ExperimentSpec,
    pub dims: Vec<usize>,
    pub pit_fractions: Vec<f64>,
    pub classes: Vec<PolicyClass>,
    /// `(blocks, heads)` values crossed for SAINT cells; empty keeps the
    /// base setting.
    pub blocks: Vec<usize>,
    pub heads: Vec<usize>,
}

impl SweepPlan {
    /// D ∈ {2, 4, 7}, pit fraction ∈ {0, 0.25, 1}, every class.
    pub fn desk_scale(base: ExperimentSpec) -> Self {
        Self {
            base,
            dims: vec![2, 4, 7],
            pit_fractions: vec![0.0, 0.25, 1.0],
            classes: PolicyClass::ALL.to_vec(),
            blocks: Vec::new(),
            heads: Vec::new(),
        }
    }

    /// SAINT over L ∈ {1, 3} × H ∈ {1, 4} plus the factorized reference,
    /// on the base environment.
    pub fn depth_heads(base: ExperimentSpec) -> Self {
        Self {
            dims: vec![base.env.dims],
            pit_fractions: vec![base.env.pit_fraction],
            base,
            classes: vec![PolicyClass::Saint, PolicyClass::Factorized],
            blocks: vec![1, 3],
            heads: vec![1, 4],
        }
    }

    /// Every cell as `(label, spec)`. Flat cells beyond the size guard are
    /// reported in the second list rather than planned.
    pub fn cells(&self) -> (Vec<(String, ExperimentSpec)>, Vec<String>) {
        let mut cells = Vec::new();
        let mut skipped = Vec::new();
        for &dims in &self.dims {
            for &pit in &self.pit_fractions {
                for &class in &self.classes {
                    let mut spec = self.base.clone();
                    let mut env =
                        crate::cone::ConeConfig::new(dims, spec.env.size, pit, spec.env.seed);
                    env.goal_bonus = spec.env.goal_bonus;
                    env.discount = spec.env.discount;
                    spec.env = env;
                    spec.policy.class = class;
                    spec.policy.ip_count = match class {
                        PolicyClass::SaintIp => {
                            spec.policy.ip_count.or(Some(super::DEFAULT_IP_COUNT))
                        }
                        _ => None,
                    };
                    let base_label = format!("{class}_D{dims}_p{pit}");
                    let grid: Vec<(usize, usize)> = if class.is_saint() && !self.blocks.is_empty() {
                        self.blocks
                            .iter()
                            .flat_map(|&l| self.heads.iter().map(move |&h| (l, h)))
                            .collect()
                    } else {
                        vec![(spec.policy.blocks, spec.policy.heads)]
                    };
                    for (l, h) in grid {
                        let mut cell = spec.clone();
                        cell.policy.blocks = l;
                        cell.policy.heads = h;
                        let label = if class.is_saint() && !self.blocks.is_empty() {
                            format!("{base_label}_L{l}_H{h}")
                        } else {
                            base_label.clone()
                        };
                        cell.out_dir = self.base.out_dir.join(&label);
                        match cell.validate() {
                            Ok(()) => cells.push((label, cell)),
                            Err(e) => skipped.push(format!("{label}: {e}")),
                        }
                    }
                }
            }
        }
        (cells, skipped)
    }
}

/// Runs every planned cell and writes a combined `summary.csv` in the
/// base output directory.
pub fn sweep(plan: &SweepPlan, log: &mut dyn FnMut(&str)) -> Result<Vec<RunResult>> {
    let (cells, skipped) = plan.cells();
    for s in &skipped {
        log(&format!("skipped {s}"));
    }
    fs::create_dir_all(&plan.base.out_dir).map_err(|e| Error::io(&plan.base.out_dir, e))?;
    let mut results = Vec::new();
    for (label, spec) in cells {
        log(&format!("cell {label}"));
        results.push(run_experiment(&spec, log)?);
    }
    let rows: Vec<SummaryRow> = results.iter().map(|r| r.row.clone()).collect();
    write_summary(&summary_path(&plan.base.out_dir), &rows)?;
    Ok(results)
}
