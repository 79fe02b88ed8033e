//! Training loops and policy evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::rollout::{collect_rollout, compute_gae, EnvRunner};
use super::update::{a2c_update, offline_awr_update, ppo_update, LossReport, OfflineSample};
use super::{Objective, TrainConfig, ValueNet};
use crate::cone::{ConeInstance, Dataset, Episode, StepCause};
use crate::error::{Error, Result};
use crate::policy::{Policy, PolicyRng};

/// Seed offset separating the critic's initialization stream from the
/// sampling stream.
const VALUE_SEED_OFFSET: u64 = 0x5EED_0F_C817;

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub env_steps: usize,
    pub episode_return: f64,
    pub length: usize,
    pub cause: StepCause,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub episodes: Vec<EpisodeRecord>,
    pub updates: Vec<LossReport>,
    pub value: ValueNet,
    pub env_steps: usize,
}

impl TrainOutcome {
    /// Mean return over the last `fraction` of episodes (at least one).
    pub fn final_window_mean(&self, fraction: f64) -> Option<f64> {
        let n = self.episodes.len();
        if n == 0 {
            return None;
        }
        let w = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
        Some(
            self.episodes[n - w..]
                .iter()
                .map(|e| e.episode_return)
                .sum::<f64>()
                / w as f64,
        )
    }
}

/// Online A2C or PPO on one environment instance. `on_episode` sees every
/// finished episode as it completes. Stops when `total_steps` environment
/// steps or `max_episodes` episodes are reached.
pub fn train_online(
    instance: &ConeInstance,
    policy: &mut dyn Policy,
    cfg: &TrainConfig,
    on_episode: &mut dyn FnMut(&EpisodeRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.objective == Objective::OfflineAwr {
        return Err(Error::Config(
            "offline_awr trains from a dataset; use train_offline".into(),
        ));
    }
    let start = Instant::now();
    let mut value = ValueNet::init(
        policy.state_dim(),
        cfg.value_hidden,
        cfg.seed.wrapping_add(VALUE_SEED_OFFSET),
    )?;
    let mut rng = PolicyRng::seed_from_u64(cfg.seed);
    let mut runner = EnvRunner::new(instance);
    let max_episodes = cfg.max_episodes.unwrap_or(usize::MAX);
    let mut episodes = Vec::new();
    let mut updates = Vec::new();
    while runner.env_steps() < cfg.total_steps && episodes.len() < max_episodes {
        let n = cfg.rollout_len.min(cfg.total_steps - runner.env_steps());
        let (mut batch, finished) = collect_rollout(&mut runner, policy, &value, n, &mut rng)?;
        compute_gae(&mut batch, cfg.discount, cfg.gae_lambda)?;
        match cfg.objective {
            Objective::A2c => updates.push(a2c_update(policy, &mut value, &batch, cfg)?),
            Objective::Ppo => {
                updates.extend(ppo_update(policy, &mut value, &batch, cfg, &mut rng)?)
            }
            Objective::OfflineAwr => unreachable!(),
        }
        let elapsed = start.elapsed().as_secs_f64();
        for f in finished {
            if episodes.len() >= max_episodes {
                break;
            }
            let record = EpisodeRecord {
                episode: f.index,
                env_steps: f.env_steps,
                episode_return: f.episode_return,
                length: f.length,
                cause: f.cause,
                wall_clock_s: elapsed,
            };
            on_episode(&record)?;
            episodes.push(record);
        }
    }
    Ok(TrainOutcome {
        episodes,
        updates,
        value,
        env_steps: runner.env_steps(),
    })
}

/// Turns a dataset into training samples with per-episode discounted
/// returns-to-go.
pub fn offline_samples(dataset: &Dataset, discount: f64) -> Vec<OfflineSample> {
    let returns = dataset.returns_to_go(discount);
    dataset
        .transitions
        .iter()
        .zip(returns)
        .map(|(t, ret)| OfflineSample {
            state: t.state.clone(),
            action: t.action.clone(),
            ret,
        })
        .collect()
}

/// Offline AWR for `cfg.epochs` shuffled passes over the dataset in
/// minibatches of `cfg.minibatch`. Never touches an environment.
pub fn train_offline(
    dataset: &Dataset,
    policy: &mut dyn Policy,
    cfg: &TrainConfig,
    on_update: &mut dyn FnMut(&LossReport) -> Result<()>,
) -> Result<(ValueNet, Vec<LossReport>)> {
    cfg.validate()?;
    if dataset.transitions.is_empty() {
        return Err(Error::Contract(
            "offline training on an empty dataset".into(),
        ));
    }
    let samples = offline_samples(dataset, cfg.discount);
    let mut value = ValueNet::init(
        policy.state_dim(),
        cfg.value_hidden,
        cfg.seed.wrapping_add(VALUE_SEED_OFFSET),
    )?;
    let mut rng = PolicyRng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut reports = Vec::new();
    let mut chunk_samples = Vec::with_capacity(cfg.minibatch);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.minibatch) {
            chunk_samples.clear();
            chunk_samples.extend(chunk.iter().map(|&i| samples[i].clone()));
            let report = offline_awr_update(policy, &mut value, &chunk_samples, cfg)?;
            on_update(&report)?;
            reports.push(report);
        }
    }
    Ok((value, reports))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub returns: Vec<f64>,
    pub mean_return: f64,
    pub mean_length: f64,
    pub goal_rate: f64,
}

/// Runs `episodes` full episodes, acting greedily or by sampling.
pub fn evaluate_policy(
    instance: &ConeInstance,
    policy: &dyn Policy,
    episodes: usize,
    greedy: bool,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Contract(
            "evaluation needs at least one episode".into(),
        ));
    }
    let mut rng = PolicyRng::seed_from_u64(seed);
    let mut returns = Vec::with_capacity(episodes);
    let mut lengths = 0usize;
    let mut goals = 0usize;
    for _ in 0..episodes {
        let mut ep = Episode::new(instance);
        let mut obs = ep.reset();
        let mut total = 0.0;
        loop {
            let action = if greedy {
                policy.greedy(&obs)?
            } else {
                policy.sample(&obs, &mut rng)?.0
            };
            let step = ep.step(&action)?;
            total += step.reward;
            if step.done {
                goals += usize::from(step.cause == StepCause::Goal);
                break;
            }
            obs = step.observation;
        }
        lengths += ep.steps();
        returns.push(total);
    }
    let n = episodes as f64;
    Ok(EvalReport {
        mean_return: returns.iter().sum::<f64>() / n,
        returns,
        mean_length: lengths as f64 / n,
        goal_rate: goals as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone::{ConeConfig, DatasetHeader, Transition};
    use crate::policy::{FactorizedConfig, FactorizedPolicy};

    fn policy(seed: u64) -> FactorizedPolicy {
        FactorizedPolicy::init(
            FactorizedConfig {
                cardinalities: vec![2; 4],
                state_dim: 2,
                hidden: 16,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn episode_cap_stops_training() {
        let inst = ConeInstance::build(ConeConfig::new(2, 5, 0.0, 0)).unwrap();
        let mut pol = policy(0);
        let cfg = TrainConfig {
            max_episodes: Some(5),
            total_steps: 1_000_000,
            ..TrainConfig::default()
        };
        let mut seen = 0;
        let out = train_online(&inst, &mut pol, &cfg, &mut |_| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(out.episodes.len(), 5);
        assert_eq!(seen, 5);
        for w in out.episodes.windows(2) {
            assert!(w[0].env_steps < w[1].env_steps);
            assert!(w[0].wall_clock_s <= w[1].wall_clock_s);
        }
    }

    #[test]
    fn online_training_is_reproducible() {
        let inst = ConeInstance::build(ConeConfig::new(2, 4, 0.25, 2)).unwrap();
        for objective in [Objective::A2c, Objective::Ppo] {
            let cfg = TrainConfig {
                objective,
                total_steps: 300,
                minibatch: 16,
                epochs: 2,
                ..TrainConfig::default()
            };
            let run = || {
                let mut pol = policy(3);
                let out = train_online(&inst, &mut pol, &cfg, &mut |_| Ok(())).unwrap();
                let returns: Vec<f64> = out.episodes.iter().map(|e| e.episode_return).collect();
                (returns, pol.params().clone())
            };
            let (r1, p1) = run();
            let (r2, p2) = run();
            assert_eq!(r1, r2);
            for (name, t) in p1.iter() {
                assert_eq!(t, p2.get(name).unwrap());
            }
        }
    }

    #[test]
    fn offline_objective_is_refused_online() {
        let inst = ConeInstance::build(ConeConfig::new(2, 4, 0.0, 0)).unwrap();
        let cfg = TrainConfig {
            objective: Objective::OfflineAwr,
            ..TrainConfig::default()
        };
        assert!(train_online(&inst, &mut policy(0), &cfg, &mut |_| Ok(())).is_err());
    }

    /// Two one-step states, two actions each. In state 0 action (1,·,·,·)
    /// pays 1 and anything else pays 0; in state 1 the reverse. Logged
    /// uniformly, so behavior cloning alone would stay near 0.5.
    #[test]
    fn tabular_awr_prefers_the_better_action() {
        let mut transitions = Vec::new();
        let states = [vec![0.0, 0.0], vec![1.0, 1.0]];
        for rep in 0..50 {
            for (si, s) in states.iter().enumerate() {
                for a0 in 0..2 {
                    let reward = if a0 == 1 - si { 1.0 } else { 0.0 };
                    transitions.push(Transition {
                        t: 0,
                        state: s.clone(),
                        action: vec![a0, rep % 2, 0, 1],
                        reward,
                        next_state: s.clone(),
                        done: true,
                        cause: StepCause::Goal,
                    });
                }
            }
        }
        let dataset = Dataset {
            header: DatasetHeader {
                config: ConeConfig::new(2, 5, 0.0, 0),
                behavior: "uniform".into(),
                epsilon: 1.0,
                seed: 0,
                transitions: transitions.len(),
            },
            transitions,
        };
        let mut pol = policy(1);
        let cfg = TrainConfig {
            objective: Objective::OfflineAwr,
            lr: 1e-2,
            epochs: 60,
            minibatch: 50,
            awr_temperature: 0.1,
            ..TrainConfig::default()
        };
        train_offline(&dataset, &mut pol, &cfg, &mut |_| Ok(())).unwrap();
        for (si, s) in states.iter().enumerate() {
            let p = pol.forward(s).unwrap().probs[0][1 - si];
            assert!(p > 0.9, "state {si}: {p}");
        }
    }

    #[test]
    fn evaluation_counts_goals() {
        let inst = ConeInstance::build(ConeConfig::new(1, 3, 0.0, 0)).unwrap();
        let mut pol = FactorizedPolicy::init(
            FactorizedConfig {
                cardinalities: vec![2, 2],
                state_dim: 1,
                hidden: 4,
            },
            0,
        )
        .unwrap();
        // Force "move +1": head0 prefers 1, head1 prefers 0.
        for (name, bias) in [
            ("head0.b", vec![-50.0, 50.0]),
            ("head1.b", vec![50.0, -50.0]),
        ] {
            pol.params_mut()
                .set(name, crate::compute::Tensor::vector(bias))
                .unwrap();
        }
        let report = evaluate_policy(&inst, &pol, 3, true, 0).unwrap();
        assert_eq!(report.goal_rate, 1.0);
        assert_eq!(report.mean_return, 9.0);
        assert_eq!(report.mean_length, 2.0);
    }
}
