//! On-policy rollout collection and generalized advantage estimation.

use super::ValueNet;
use crate::cone::{ConeInstance, Episode, StepCause};
use crate::error::{Error, Result};
use crate::policy::{Policy, PolicyRng};

/// A persistent environment context: episodes continue across rollouts and
/// reset automatically when they end.
#[derive(Clone, Debug)]
pub struct EnvRunner<'a> {
    episode: Episode<'a>,
    observation: Vec<f64>,
    episode_return: f64,
    episodes_done: usize,
    env_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinishedEpisode {
    /// Zero-based index among all episodes this runner has finished.
    pub index: usize,
    pub episode_return: f64,
    pub length: usize,
    pub cause: StepCause,
    /// Runner-wide environment steps at the moment the episode ended.
    pub env_steps: usize,
}

impl<'a> EnvRunner<'a> {
    pub fn new(instance: &'a ConeInstance) -> Self {
        let mut episode = Episode::new(instance);
        let observation = episode.reset();
        Self {
            episode,
            observation,
            episode_return: 0.0,
            episodes_done: 0,
            env_steps: 0,
        }
    }

    pub fn instance(&self) -> &'a ConeInstance {
        self.episode.instance()
    }

    pub fn observation(&self) -> &[f64] {
        &self.observation
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    pub fn episodes_done(&self) -> usize {
        self.episodes_done
    }
}

/// Transitions in collection order plus per-step policy and critic
/// outputs. `returns` and `advantages` are filled by [`compute_gae`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBatch {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    /// `V(s_n)` when the batch ends mid-episode, else 0.
    pub bootstrap_value: f64,
    /// Whether the last transition was cut by the batch boundary.
    pub truncated: bool,
    pub returns: Vec<f64>,
    /// Normalized advantages.
    pub advantages: Vec<f64>,
    /// Advantages before normalization.
    pub raw_advantages: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn check_consistent(&self) -> Result<()> {
        let n = self.states.len();
        let lens = [
            self.actions.len(),
            self.rewards.len(),
            self.dones.len(),
            self.log_probs.len(),
            self.values.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Contract(format!(
                "rollout arrays disagree in length: states {n}, others {lens:?}"
            )));
        }
        for (name, v) in [
            ("returns", &self.returns),
            ("advantages", &self.advantages),
            ("raw_advantages", &self.raw_advantages),
        ] {
            if !v.is_empty() && v.len() != n {
                return Err(Error::Contract(format!(
                    "{name} has {} entries, expected {n}",
                    v.len()
                )));
            }
        }
        Ok(())
    }
}

/// Steps the environment `n_steps` times under `policy`, resetting at
/// episode ends. Values are recorded for every visited state, and the
/// batch bootstraps from `V(s_n)` when it stops mid-episode.
pub fn collect_rollout(
    runner: &mut EnvRunner<'_>,
    policy: &dyn Policy,
    value: &ValueNet,
    n_steps: usize,
    rng: &mut PolicyRng,
) -> Result<(RolloutBatch, Vec<FinishedEpisode>)> {
    let cfg = runner.instance().config();
    if policy.cardinalities().len() != cfg.num_sub_actions() || policy.state_dim() != cfg.dims {
        return Err(Error::Contract(format!(
            "policy with {} sub-actions and state width {} cannot drive a {}-D environment",
            policy.cardinalities().len(),
            policy.state_dim(),
            cfg.dims
        )));
    }
    let mut batch = RolloutBatch::default();
    let mut finished = Vec::new();
    for _ in 0..n_steps {
        let state = runner.observation.clone();
        let (action, log_prob) = policy.sample(&state, rng)?;
        let step = runner.episode.step(&action)?;
        runner.env_steps += 1;
        runner.episode_return += step.reward;
        batch.states.push(state);
        batch.actions.push(action);
        batch.rewards.push(step.reward);
        batch.dones.push(step.done);
        batch.log_probs.push(log_prob);
        if step.done {
            finished.push(FinishedEpisode {
                index: runner.episodes_done,
                episode_return: runner.episode_return,
                length: runner.episode.steps(),
                cause: step.cause,
                env_steps: runner.env_steps,
            });
            runner.episodes_done += 1;
            runner.episode_return = 0.0;
            runner.observation = runner.episode.reset();
        } else {
            runner.observation = step.observation;
        }
    }
    batch.truncated = batch.dones.last().is_some_and(|&d| !d);
    let mut to_value = batch.states.clone();
    if batch.truncated {
        to_value.push(runner.observation.clone());
    }
    let mut values = value.predict(&to_value)?;
    if batch.truncated {
        batch.bootstrap_value = values.pop().unwrap_or(0.0);
    }
    batch.values = values;
    Ok((batch, finished))
}

/// Generalized advantage estimation. Sets `raw_advantages`, `returns =
/// raw_advantages + values` and `advantages` normalized to mean 0 and
/// standard deviation 1 (standard deviation floored at 1e-8).
pub fn compute_gae(batch: &mut RolloutBatch, discount: f64, lambda: f64) -> Result<()> {
    batch.check_consistent()?;
    let n = batch.len();
    let mut raw = vec![0.0; n];
    let mut gae = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n {
            batch.values[t + 1]
        } else {
            batch.bootstrap_value
        };
        let live = if batch.dones[t] { 0.0 } else { 1.0 };
        let delta = batch.rewards[t] + discount * next_value * live - batch.values[t];
        gae = delta + discount * lambda * live * gae;
        raw[t] = gae;
    }
    batch.returns = raw.iter().zip(&batch.values).map(|(a, v)| a + v).collect();
    batch.advantages = normalize(&raw);
    batch.raw_advantages = raw;
    Ok(())
}

pub(crate) fn normalize(xs: &[f64]) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    xs.iter().map(|x| (x - mean) / std).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone::ConeConfig;
    use crate::policy::{FactorizedConfig, FactorizedPolicy};
    use rand::SeedableRng;

    fn setup() -> (ConeInstance, FactorizedPolicy, ValueNet) {
        let inst = ConeInstance::build(ConeConfig::new(2, 5, 0.25, 1)).unwrap();
        let pol = FactorizedPolicy::init(
            FactorizedConfig {
                cardinalities: vec![2; 4],
                state_dim: 2,
                hidden: 8,
            },
            0,
        )
        .unwrap();
        (inst, pol, ValueNet::init(2, 8, 0).unwrap())
    }

    fn manual(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64) -> RolloutBatch {
        let n = rewards.len();
        RolloutBatch {
            states: vec![vec![0.0]; n],
            actions: vec![vec![0]; n],
            rewards: rewards.to_vec(),
            dones: dones.to_vec(),
            log_probs: vec![0.0; n],
            values: values.to_vec(),
            bootstrap_value: bootstrap,
            truncated: !dones[n - 1],
            ..Default::default()
        }
    }

    #[test]
    fn one_step_rollout() {
        let (inst, pol, v) = setup();
        let mut runner = EnvRunner::new(&inst);
        let mut rng = PolicyRng::seed_from_u64(0);
        let (b, _) = collect_rollout(&mut runner, &pol, &v, 1, &mut rng).unwrap();
        assert_eq!(b.len(), 1);
        b.check_consistent().unwrap();
    }

    #[test]
    fn same_seed_same_batch() {
        let (inst, pol, v) = setup();
        let run = || {
            let mut runner = EnvRunner::new(&inst);
            let mut rng = PolicyRng::seed_from_u64(3);
            collect_rollout(&mut runner, &pol, &v, 200, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn stored_log_probs_match_recomputation() {
        let (inst, pol, v) = setup();
        let mut runner = EnvRunner::new(&inst);
        let mut rng = PolicyRng::seed_from_u64(4);
        let (b, _) = collect_rollout(&mut runner, &pol, &v, 100, &mut rng).unwrap();
        for ((s, a), lp) in b.states.iter().zip(&b.actions).zip(&b.log_probs) {
            assert!((pol.log_prob(s, a).unwrap() - lp).abs() < 1e-12);
        }
    }

    #[test]
    fn truncated_batch_bootstraps_from_next_state() {
        let (inst, pol, v) = setup();
        let mut runner = EnvRunner::new(&inst);
        let mut rng = PolicyRng::seed_from_u64(5);
        let (b, _) = collect_rollout(&mut runner, &pol, &v, 3, &mut rng).unwrap();
        if b.truncated {
            let expect = v.predict(&[runner.observation().to_vec()]).unwrap()[0];
            assert_eq!(b.bootstrap_value, expect);
        } else {
            assert_eq!(b.bootstrap_value, 0.0);
        }
    }

    #[test]
    fn episodes_continue_across_batches() {
        let (inst, pol, v) = setup();
        let mut runner = EnvRunner::new(&inst);
        let mut rng = PolicyRng::seed_from_u64(6);
        let mut lengths = 0;
        let mut finished = Vec::new();
        for _ in 0..20 {
            let (_, f) = collect_rollout(&mut runner, &pol, &v, 7, &mut rng).unwrap();
            finished.extend(f);
        }
        for (i, f) in finished.iter().enumerate() {
            assert_eq!(f.index, i);
            lengths += f.length;
            assert_eq!(f.env_steps, lengths);
        }
    }

    #[test]
    fn lambda_zero_is_one_step_td() {
        let mut b = manual(
            &[1.0, -2.0, 0.5],
            &[0.3, 0.1, -0.4],
            &[false, true, false],
            0.7,
        );
        compute_gae(&mut b, 0.9, 0.0).unwrap();
        let expect = [1.0 + 0.9 * 0.1 - 0.3, -2.0 - 0.1, 0.5 + 0.9 * 0.7 + 0.4];
        for (a, e) in b.raw_advantages.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_discount_is_reward_minus_value() {
        let mut b = manual(
            &[1.0, -2.0, 0.5],
            &[0.3, 0.1, -0.4],
            &[false, false, false],
            0.7,
        );
        compute_gae(&mut b, 0.0, 0.95).unwrap();
        for i in 0..3 {
            assert!((b.raw_advantages[i] - (b.rewards[i] - b.values[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_one_is_monte_carlo_minus_value() {
        let rewards = [1.0, 2.0, -1.0, 0.5, 3.0];
        let values = [0.2, -0.1, 0.4, 0.0, 1.0];
        let dones = [false, false, true, false, true];
        let mut b = manual(&rewards, &values, &dones, 0.0);
        let gamma = 0.8;
        compute_gae(&mut b, gamma, 1.0).unwrap();
        let mc = |start: usize, end: usize| -> f64 {
            (start..=end)
                .map(|k| gamma.powi((k - start) as i32) * rewards[k])
                .sum()
        };
        let expect = [
            mc(0, 2) - values[0],
            mc(1, 2) - values[1],
            mc(2, 2) - values[2],
            mc(3, 4) - values[3],
            mc(4, 4) - values[4],
        ];
        for (a, e) in b.raw_advantages.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
        for i in 0..5 {
            assert!((b.returns[i] - (b.raw_advantages[i] + values[i])).abs() < 1e-15);
        }
        let mean: f64 = b.advantages.iter().sum::<f64>() / 5.0;
        let var: f64 = b.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_advantages_normalize_to_zero() {
        assert_eq!(normalize(&[2.0, 2.0]), vec![0.0, 0.0]);
    }
}
