//! Metrics CSV, seed aggregation and time-to-baseline.
//!
//! Metrics files have the header `seed,episode,env_steps,return,wall_clock_s`.
//! Floats are written in shortest round-trip form.

use std::fmt;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Share of a run's episodes that forms its final window.
pub const FINAL_WINDOW: f64 = 0.1;
/// Trailing window length used by [`time_to_baseline`].
pub const TRAILING_EPISODES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub episode: usize,
    pub env_steps: usize,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub wall_clock_s: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path.display().to_string(), format!("{other:?}")),
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = MetricsWriter::new(file, path)?;
    for r in rows {
        w.push(r)?;
    }
    w.finish()
}

/// Streams rows to a metrics file as they are produced.
pub struct MetricsWriter<W: std::io::Write> {
    inner: csv::Writer<W>,
    path: std::path::PathBuf,
    wrote: bool,
}

impl<W: std::io::Write> MetricsWriter<W> {
    pub fn new(out: W, path: &Path) -> Result<Self> {
        Ok(Self {
            inner: csv::Writer::from_writer(out),
            path: path.to_owned(),
            wrote: false,
        })
    }

    pub fn push(&mut self, row: &MetricsRow) -> Result<()> {
        self.wrote = true;
        self.inner
            .serialize(row)
            .map_err(|e| csv_err(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        if !self.wrote {
            self.inner
                .write_record(["seed", "episode", "env_steps", "return", "wall_clock_s"])
                .map_err(|e| csv_err(&self.path, e))?;
        }
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let expected = ["seed", "episode", "env_steps", "return", "wall_clock_s"];
    if header.iter().ne(expected) {
        return Err(Error::parse(
            path.display().to_string(),
            format!(
                "header {:?}, expected {expected:?}",
                header.iter().collect::<Vec<_>>()
            ),
        ));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

/// One seed's learning curve plus the configuration it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    /// Configuration identity; runs with different identities never mix.
    pub identity: String,
    /// Environment identity; comparisons require equal values.
    pub env_identity: String,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
}

impl SeedRun {
    /// Mean return over the last 10% of episodes (at least one).
    pub fn final_window_mean(&self) -> Result<f64> {
        let n = self.rows.len();
        if n == 0 {
            return Err(Error::Contract(format!(
                "seed {} has no episodes",
                self.seed
            )));
        }
        let w = ((n as f64 * FINAL_WINDOW).ceil() as usize).clamp(1, n);
        Ok(self.rows[n - w..]
            .iter()
            .map(|r| r.episode_return)
            .sum::<f64>()
            / w as f64)
    }

    pub fn total_wall_clock(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.wall_clock_s)
    }

    /// Wall-clock of the first episode whose trailing mean reaches `level`.
    pub fn first_reaching(&self, level: f64) -> Option<f64> {
        let k = TRAILING_EPISODES.min(self.rows.len());
        if k == 0 {
            return None;
        }
        let mut sum: f64 = self.rows[..k - 1].iter().map(|r| r.episode_return).sum();
        for i in k - 1..self.rows.len() {
            sum += self.rows[i].episode_return;
            if i >= k {
                sum -= self.rows[i - k].episode_return;
            }
            if sum / k as f64 >= level {
                return Some(self.rows[i].wall_clock_s);
            }
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub identity: String,
    pub seed_means: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of the per-seed means.
    pub std: f64,
}

/// Final-window mean and population std across seeds of one configuration.
pub fn aggregate(runs: &[SeedRun]) -> Result<Summary> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Contract("aggregate needs at least one seed".into()))?;
    if let Some(other) = runs.iter().find(|r| r.identity != first.identity) {
        return Err(Error::Refused(format!(
            "seeds {} and {} come from different configurations",
            first.seed, other.seed
        )));
    }
    let seed_means = runs
        .iter()
        .map(SeedRun::final_window_mean)
        .collect::<Result<Vec<_>>>()?;
    let n = seed_means.len() as f64;
    let mean = seed_means.iter().sum::<f64>() / n;
    let var = seed_means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
    Ok(Summary {
        identity: first.identity.clone(),
        seed_means,
        mean,
        std: var.sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeToBaseline {
    Reached(f64),
    Unreachable,
}

impl TimeToBaseline {
    pub fn is_finite(self) -> bool {
        matches!(self, TimeToBaseline::Reached(_))
    }

    pub fn seconds(self) -> f64 {
        match self {
            TimeToBaseline::Reached(s) => s,
            TimeToBaseline::Unreachable => f64::INFINITY,
        }
    }
}

impl fmt::Display for TimeToBaseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeToBaseline::Reached(s) => write!(f, "{s:?}"),
            TimeToBaseline::Unreachable => f.write_str("unreachable"),
        }
    }
}

/// Mean over candidate seeds of the first wall-clock at which the
/// candidate's 10-episode trailing mean reaches the baseline's aggregated
/// final-window mean. Unreachable if any candidate seed never gets there.
pub fn time_to_baseline(candidate: &[SeedRun], baseline: &[SeedRun]) -> Result<TimeToBaseline> {
    let level = aggregate(baseline)?.mean;
    aggregate(candidate)?;
    let env = &baseline[0].env_identity;
    if let Some(r) = candidate
        .iter()
        .chain(baseline)
        .find(|r| &r.env_identity != env)
    {
        return Err(Error::Refused(format!(
            "seed {} ran on a different environment ({}) than the baseline ({env})",
            r.seed, r.env_identity
        )));
    }
    let mut total = 0.0;
    for run in candidate {
        match run.first_reaching(level) {
            Some(t) => total += t,
            None => return Ok(TimeToBaseline::Unreachable),
        }
    }
    Ok(TimeToBaseline::Reached(total / candidate.len() as f64))
}

/// One line of a summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub class: String,
    #[serde(rename = "D")]
    pub dims: usize,
    #[serde(rename = "M")]
    pub size: usize,
    pub pit_fraction: f64,
    #[serde(rename = "L")]
    pub blocks: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    pub params: usize,
    pub seeds: usize,
    pub final_mean: f64,
    pub final_std: f64,
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(seed: u64, returns: &[f64], dt: f64) -> SeedRun {
        SeedRun {
            identity: "cfg".into(),
            env_identity: "env".into(),
            seed,
            rows: returns
                .iter()
                .enumerate()
                .map(|(i, &r)| MetricsRow {
                    seed,
                    episode: i,
                    env_steps: 3 * (i + 1),
                    episode_return: r,
                    wall_clock_s: dt * (i + 1) as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn one_seed_has_zero_std() {
        let s = aggregate(&[run(0, &[1.0, 2.0, 3.0], 1.0)]).unwrap();
        assert_eq!(s.std, 0.0);
        assert_eq!(s.mean, 3.0);
    }

    #[test]
    fn constant_seeds_one_two_three() {
        let runs: Vec<_> = (1..=3).map(|s| run(s, &[s as f64; 20], 1.0)).collect();
        let s = aggregate(&runs).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn mixed_configs_are_refused() {
        let mut b = run(1, &[1.0], 1.0);
        b.identity = "other".into();
        assert!(matches!(
            aggregate(&[run(0, &[1.0], 1.0), b]),
            Err(Error::Refused(_))
        ));
    }

    #[test]
    fn window_is_last_tenth() {
        let mut returns = vec![0.0; 90];
        returns.extend([10.0; 10]);
        assert_eq!(run(0, &returns, 1.0).final_window_mean().unwrap(), 10.0);
        let r = run(0, &[0.0; 15], 1.0);
        assert_eq!(r.final_window_mean().unwrap(), 0.0);
    }

    #[test]
    fn csv_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = run(7, &[0.1 + 0.2, -1e-300, 1.0 / 3.0], 0.123456789012345).rows;
        write_metrics(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("seed,episode,env_steps,return,wall_clock_s\n"));
        assert_eq!(read_metrics(&path).unwrap(), rows);
        write_metrics(&path, &[]).unwrap();
        assert!(read_metrics(&path).unwrap().is_empty());
    }

    #[test]
    fn hand_built_crossings() {
        // Baseline level: final-window mean 5 on every seed.
        let base: Vec<_> = (0..2).map(|s| run(s, &[5.0; 30], 1.0)).collect();
        // Seed 0 jumps to 10 at episode 20: trailing mean of 10 first hits 5
        // when five tens are in the window, episode 24, wall-clock 25 * 0.5.
        let mut a = vec![0.0; 20];
        a.extend([10.0; 20]);
        // Seed 1 is at 5 throughout: reached at episode 9, wall-clock 10 * 2.
        let cand = vec![run(0, &a, 0.5), run(1, &[5.0; 40], 2.0)];
        let t = time_to_baseline(&cand, &base).unwrap();
        assert_eq!(t, TimeToBaseline::Reached((12.5 + 20.0) / 2.0));
    }

    #[test]
    fn never_reaching_is_unreachable() {
        let base = vec![run(0, &[5.0; 30], 1.0)];
        let cand = vec![run(0, &[5.0; 30], 1.0), run(1, &[4.9; 30], 1.0)];
        let t = time_to_baseline(&cand, &base).unwrap();
        assert_eq!(t, TimeToBaseline::Unreachable);
        assert_eq!(t.to_string(), "unreachable");
        assert!(t.seconds().is_infinite());
    }

    #[test]
    fn self_comparison_within_total_wall_clock() {
        let mut curve: Vec<f64> = (0..200)
            .map(|i| (i as f64 / 20.0).sin() + i as f64 * 0.01)
            .collect();
        let runs: Vec<_> = (0..3)
            .map(|s| {
                curve.rotate_left(1);
                run(s, &curve, 0.01 * (s + 1) as f64)
            })
            .collect();
        let t = time_to_baseline(&runs, &runs).unwrap();
        let total = runs
            .iter()
            .map(SeedRun::total_wall_clock)
            .fold(0.0, f64::max);
        assert!(t.seconds() <= total, "{t} > {total}");
    }

    #[test]
    fn environment_mismatch_is_refused() {
        let base = vec![run(0, &[1.0; 10], 1.0)];
        let mut c = run(0, &[1.0; 10], 1.0);
        c.env_identity = "env.D=3".into();
        assert!(matches!(
            time_to_baseline(&[c], &base),
            Err(Error::Refused(_))
        ));
    }
}
