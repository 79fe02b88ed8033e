//! Logged transition datasets for offline training.
//!
//! A dataset file is UTF-8 JSON lines. The first line is a [`DatasetHeader`]
//! carrying the environment configuration; every following line is one
//! [`Transition`]. Floats are written in shortest round-trip form, so a
//! write/read cycle is bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{ConeConfig, ConeInstance, Episode, StepCause};
use crate::error::{Error, Result};
use crate::policy::{Policy, PolicyRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub config: ConeConfig,
    pub behavior: String,
    pub epsilon: f64,
    pub seed: u64,
    pub transitions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Step index within the episode, starting at 0.
    pub t: usize,
    pub state: Vec<f64>,
    pub action: Vec<usize>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    pub cause: StepCause,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub transitions: Vec<Transition>,
}

impl Dataset {
    /// Index ranges of consecutive episodes. A trailing unfinished episode
    /// is included as its own range.
    pub fn episode_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, tr) in self.transitions.iter().enumerate() {
            if tr.done {
                out.push(start..i + 1);
                start = i + 1;
            }
        }
        if start < self.transitions.len() {
            out.push(start..self.transitions.len());
        }
        out
    }

    /// Mean undiscounted return over finished episodes (all episodes if
    /// none finished).
    pub fn mean_episode_return(&self) -> f64 {
        let ranges = self.episode_ranges();
        let finished: Vec<_> = ranges
            .iter()
            .filter(|r| self.transitions[r.end - 1].done)
            .cloned()
            .collect();
        let used = if finished.is_empty() {
            ranges
        } else {
            finished
        };
        if used.is_empty() {
            return 0.0;
        }
        let total: f64 = used
            .iter()
            .map(|r| {
                self.transitions[r.clone()]
                    .iter()
                    .map(|t| t.reward)
                    .sum::<f64>()
            })
            .sum();
        total / used.len() as f64
    }

    /// Discounted return-to-go for every transition, computed per episode.
    /// An unfinished trailing episode is treated as ending where the log
    /// stops.
    pub fn returns_to_go(&self, discount: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.transitions.len()];
        for r in self.episode_ranges() {
            let mut acc = 0.0;
            for i in r.rev() {
                acc = self.transitions[i].reward + discount * acc;
                out[i] = acc;
            }
        }
        out
    }
}

/// Rolls episodes under an ε-uniform mixture of `behavior`: at each step,
/// with probability `epsilon` every sub-action is drawn uniformly,
/// otherwise the joint action is sampled from `behavior`.
pub fn generate_offline_dataset(
    instance: &ConeInstance,
    behavior: &dyn Policy,
    epsilon: f64,
    n_transitions: usize,
    seed: u64,
    path: &Path,
) -> Result<Dataset> {
    let dataset = collect_offline_dataset(instance, behavior, epsilon, n_transitions, seed)?;
    write_dataset(&dataset, path)?;
    Ok(dataset)
}

/// In-memory half of [`generate_offline_dataset`].
pub fn collect_offline_dataset(
    instance: &ConeInstance,
    behavior: &dyn Policy,
    epsilon: f64,
    n_transitions: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_transitions == 0 {
        return Err(Error::Contract("n_transitions must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let cards = behavior.cardinalities().to_vec();
    if cards.len() != instance.config().num_sub_actions()
        || behavior.state_dim() != instance.config().dims
    {
        return Err(Error::Contract(format!(
            "behavior policy ({} sub-actions, state dim {}) does not fit the environment",
            cards.len(),
            behavior.state_dim()
        )));
    }
    let mut rng = PolicyRng::seed_from_u64(seed);
    let mut episode = Episode::new(instance);
    let mut state = episode.reset();
    let mut transitions = Vec::with_capacity(n_transitions);
    while transitions.len() < n_transitions {
        let action = if rng.gen::<f64>() < epsilon {
            cards.iter().map(|&k| rng.gen_range(0..k)).collect()
        } else {
            behavior.sample(&state, &mut rng)?.0
        };
        let t = episode.steps();
        let step = episode.step(&action)?;
        transitions.push(Transition {
            t,
            state: std::mem::take(&mut state),
            action,
            reward: step.reward,
            next_state: step.observation.clone(),
            done: step.done,
            cause: step.cause,
        });
        state = if step.done {
            episode.reset()
        } else {
            step.observation
        };
    }
    Ok(Dataset {
        header: DatasetHeader {
            config: instance.config().clone(),
            behavior: behavior.kind().to_string(),
            epsilon,
            seed,
            transitions: n_transitions,
        },
        transitions,
    })
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", to_line(&dataset.header)?).map_err(|e| Error::io(path, e))?;
    for tr in &dataset.transitions {
        writeln!(w, "{}", to_line(tr)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let ctx = |n: usize| format!("{} line {n}", path.display());
    let first = lines
        .next()
        .ok_or_else(|| Error::parse(ctx(1), "empty dataset file"))?
        .map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| Error::parse(ctx(1), e.to_string()))?;
    let mut transitions = Vec::with_capacity(header.transitions);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let tr: Transition =
            serde_json::from_str(&line).map_err(|e| Error::parse(ctx(i + 2), e.to_string()))?;
        transitions.push(tr);
    }
    Ok(Dataset {
        header,
        transitions,
    })
}

fn to_line<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::parse("dataset record", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{FactorizedConfig, FactorizedPolicy};

    fn setup(pits: f64) -> (ConeInstance, FactorizedPolicy) {
        let inst = ConeInstance::build(ConeConfig::new(2, 5, pits, 3)).unwrap();
        let pol = FactorizedPolicy::init(
            FactorizedConfig {
                cardinalities: vec![2; 4],
                state_dim: 2,
                hidden: 8,
            },
            1,
        )
        .unwrap();
        (inst, pol)
    }

    #[test]
    fn single_transition_round_trips() {
        let (inst, pol) = setup(0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.jsonl");
        let ds = generate_offline_dataset(&inst, &pol, 0.3, 1, 9, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.transitions.len(), 1);
        assert_eq!(back, ds);
    }

    #[test]
    fn floats_round_trip_bit_exact() {
        let (inst, pol) = setup(0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = generate_offline_dataset(&inst, &pol, 0.5, 500, 2, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        for (a, b) in ds.transitions.iter().zip(&back.transitions) {
            assert_eq!(a.reward.to_bits(), b.reward.to_bits());
            for (x, y) in a.state.iter().zip(&b.state) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn replay_reproduces_logged_outcomes() {
        let (inst, pol) = setup(0.25);
        let ds = collect_offline_dataset(&inst, &pol, 0.3, 2000, 4).unwrap();
        for tr in &ds.transitions {
            let point = inst.point_from_observation(&tr.state).unwrap();
            let step = inst.step(&point, &tr.action).unwrap();
            assert_eq!(step.reward, tr.reward);
            assert_eq!(step.observation, tr.next_state);
            let limit = step.cause == StepCause::Ongoing && tr.t + 1 >= inst.config().max_steps;
            let done = step.done || limit;
            assert_eq!(done, tr.done);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (inst, pol) = setup(0.25);
        let a = collect_offline_dataset(&inst, &pol, 0.3, 300, 11).unwrap();
        let b = collect_offline_dataset(&inst, &pol, 0.3, 300, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pure_uniform_marginals_within_three_sigma() {
        let (inst, pol) = setup(0.0);
        let n = 50_000;
        let ds = collect_offline_dataset(&inst, &pol, 1.0, n, 5).unwrap();
        let sigma = (n as f64 * 0.25).sqrt();
        for i in 0..4 {
            let ones = ds.transitions.iter().filter(|t| t.action[i] == 1).count() as f64;
            assert!(
                (ones - n as f64 / 2.0).abs() < 3.0 * sigma,
                "sub-action {i}: {ones}"
            );
        }
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read_dataset(Path::new("/nonexistent/dir/x.jsonl")).unwrap_err();
        assert!(
            err.to_string().contains("/nonexistent/dir/x.jsonl"),
            "{err}"
        );
    }

    #[test]
    fn returns_to_go_restart_each_episode() {
        let (inst, pol) = setup(0.0);
        let ds = collect_offline_dataset(&inst, &pol, 1.0, 400, 1).unwrap();
        let g = ds.returns_to_go(0.9);
        for r in ds.episode_ranges() {
            let last = r.end - 1;
            assert_eq!(g[last], ds.transitions[last].reward);
            for i in r.start..last {
                let expect = ds.transitions[i].reward + 0.9 * g[i + 1];
                assert!((g[i] - expect).abs() < 1e-12);
            }
        }
    }
}
