//! Combinatorial navigation on a `D`-dimensional grid.
//!
//! Each axis has a pair of binary movers (positive, negative), so a joint
//! action has `2D` binary sub-actions and the joint action space has
//! `2^(2D)` members. Displacement along axis `k` is
//! `action[2k] - action[2k+1]`; both movers on cancel out. The agent starts
//! at the origin corner and must reach the opposite corner. Interior
//! points may be pits; boundary points never are.

pub mod dataset;
pub mod oracle;

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{
    collect_offline_dataset, generate_offline_dataset, read_dataset, write_dataset, Dataset,
    DatasetHeader, Transition,
};
pub use oracle::{brute_force_optimal_return, oracle_optimal_return, ORACLE_STATE_LIMIT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeConfig {
    /// Number of axes.
    pub dims: usize,
    /// Positions per axis.
    pub size: usize,
    /// Fraction of interior points that are pits.
    pub pit_fraction: f64,
    /// Pit placement seed.
    pub seed: u64,
    pub max_steps: usize,
    pub goal_bonus: f64,
    pub discount: f64,
}

impl ConeConfig {
    /// Defaults: `max_steps = 4·D·M`, goal bonus 10, discount 0.99.
    pub fn new(dims: usize, size: usize, pit_fraction: f64, seed: u64) -> Self {
        Self {
            dims,
            size,
            pit_fraction,
            seed,
            max_steps: 4 * dims * size,
            goal_bonus: 10.0,
            discount: 0.99,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 {
            return Err(Error::Config("env.D must be at least 1".into()));
        }
        if self.size < 3 {
            return Err(Error::Config(format!(
                "env.M = {} leaves no interior; need M >= 3",
                self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.pit_fraction) {
            return Err(Error::Config(format!(
                "env.pit_fraction = {} outside [0, 1]",
                self.pit_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(Error::Config(format!(
                "env.discount = {} outside [0, 1]",
                self.discount
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("env.max_steps must be positive".into()));
        }
        if (self.size as f64).powi(self.dims as i32) > u64::MAX as f64 / 4.0 {
            return Err(Error::Refused(format!(
                "grid {}^{} does not fit a 64-bit index",
                self.size, self.dims
            )));
        }
        Ok(())
    }

    /// Number of binary sub-actions, `2D`.
    pub fn num_sub_actions(&self) -> usize {
        2 * self.dims
    }

    pub fn interior_count(&self) -> u64 {
        ((self.size - 2) as u64).pow(self.dims as u32)
    }

    pub fn pit_count(&self) -> u64 {
        (self.pit_fraction * self.interior_count() as f64).round() as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepCause {
    Goal,
    Pit,
    StepLimit,
    Ongoing,
}

impl StepCause {
    pub fn as_str(self) -> &'static str {
        match self {
            StepCause::Goal => "goal",
            StepCause::Pit => "pit",
            StepCause::StepLimit => "step_limit",
            StepCause::Ongoing => "ongoing",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub position: Vec<usize>,
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub cause: StepCause,
}

/// A realized environment: configuration plus pit layout.
#[derive(Clone, Debug)]
pub struct ConeInstance {
    config: ConeConfig,
    pits: HashSet<u64>,
    pit_penalty: f64,
}

impl ConeInstance {
    /// Places pits by a seeded uniform draw without replacement over the
    /// lexicographically ordered interior points.
    pub fn build(config: ConeConfig) -> Result<Self> {
        config.validate()?;
        let interior = config.interior_count();
        let count = config.pit_count();
        let mut pits = HashSet::with_capacity(count as usize);
        if count > 0 {
            let interior_usize = usize::try_from(interior)
                .map_err(|_| Error::Refused(format!("{interior} interior points")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let inner = config.size - 2;
            for k in sample(&mut rng, interior_usize, count as usize) {
                // Decode the k-th interior point (lexicographic, first axis
                // most significant) and shift into grid coordinates.
                let mut rem = k;
                let mut point = vec![0usize; config.dims];
                for axis in (0..config.dims).rev() {
                    point[axis] = rem % inner + 1;
                    rem /= inner;
                }
                pits.insert(index_of(&point, config.size));
            }
        }
        let mut inst = Self {
            config,
            pits,
            pit_penalty: 0.0,
        };
        let start = inst.start();
        inst.pit_penalty = -10.0 * inst.distance_to_goal(&start);
        Ok(inst)
    }

    pub fn config(&self) -> &ConeConfig {
        &self.config
    }

    pub fn start(&self) -> Vec<usize> {
        vec![0; self.config.dims]
    }

    pub fn goal(&self) -> Vec<usize> {
        vec![self.config.size - 1; self.config.dims]
    }

    /// `-10·ρ(s0, g)`.
    pub fn pit_penalty(&self) -> f64 {
        self.pit_penalty
    }

    pub fn num_pits(&self) -> usize {
        self.pits.len()
    }

    pub fn is_pit(&self, point: &[usize]) -> bool {
        self.pits.contains(&index_of(point, self.config.size))
    }

    /// Pits as sorted grid points.
    pub fn pits(&self) -> Vec<Vec<usize>> {
        let mut idx: Vec<u64> = self.pits.iter().copied().collect();
        idx.sort_unstable();
        idx.into_iter()
            .map(|i| point_of(i, self.config.dims, self.config.size))
            .collect()
    }

    pub fn is_boundary(&self, point: &[usize]) -> bool {
        point.iter().any(|&c| c == 0 || c == self.config.size - 1)
    }

    pub fn is_goal(&self, point: &[usize]) -> bool {
        point.iter().all(|&c| c == self.config.size - 1)
    }

    /// Euclidean distance to the goal in grid units.
    pub fn distance_to_goal(&self, point: &[usize]) -> f64 {
        let g = (self.config.size - 1) as f64;
        point
            .iter()
            .map(|&c| (g - c as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Per-step shaping reward, evaluated at the arrived-at point.
    fn shaping_reward(&self, arrived: &[usize]) -> f64 {
        -self.distance_to_goal(arrived)
    }

    pub fn observation(&self, point: &[usize]) -> Vec<f64> {
        let scale = (self.config.size - 1) as f64;
        point.iter().map(|&c| c as f64 / scale).collect()
    }

    /// Inverse of [`observation`](Self::observation).
    pub fn point_from_observation(&self, obs: &[f64]) -> Result<Vec<usize>> {
        if obs.len() != self.config.dims {
            return Err(Error::Contract(format!(
                "observation has {} coordinates, expected {}",
                obs.len(),
                self.config.dims
            )));
        }
        let scale = (self.config.size - 1) as f64;
        obs.iter()
            .map(|&x| {
                let c = (x * scale).round();
                if (0.0..=scale).contains(&c) {
                    Ok(c as usize)
                } else {
                    Err(Error::Contract(format!("observation {x} outside the grid")))
                }
            })
            .collect()
    }

    pub fn displacement(&self, action: &[usize]) -> Result<Vec<i64>> {
        if action.len() != 2 * self.config.dims {
            return Err(Error::Contract(format!(
                "action has {} sub-actions, expected {}",
                action.len(),
                2 * self.config.dims
            )));
        }
        if let Some(i) = action.iter().position(|&a| a > 1) {
            return Err(Error::Contract(format!(
                "sub-action {i} = {} is not binary",
                action[i]
            )));
        }
        Ok(action
            .chunks(2)
            .map(|pair| pair[0] as i64 - pair[1] as i64)
            .collect())
    }

    /// Clamped move by a displacement vector with entries in `{-1, 0, 1}`.
    pub fn apply_displacement(&self, point: &[usize], delta: &[i64]) -> Vec<usize> {
        let hi = (self.config.size - 1) as i64;
        point
            .iter()
            .zip(delta)
            .map(|(&c, &d)| (c as i64 + d).clamp(0, hi) as usize)
            .collect()
    }

    /// Reward and termination of arriving at `next` (step limit aside).
    pub fn outcome(&self, next: &[usize]) -> (f64, StepCause) {
        if self.is_goal(next) {
            (self.config.goal_bonus, StepCause::Goal)
        } else if self.is_pit(next) {
            (self.pit_penalty, StepCause::Pit)
        } else {
            (self.shaping_reward(next), StepCause::Ongoing)
        }
    }

    /// One transition from `point` with no step-limit accounting.
    pub fn step(&self, point: &[usize], action: &[usize]) -> Result<StepResult> {
        let delta = self.displacement(action)?;
        let position = self.apply_displacement(point, &delta);
        let (reward, cause) = self.outcome(&position);
        Ok(StepResult {
            observation: self.observation(&position),
            position,
            reward,
            done: cause != StepCause::Ongoing,
            cause,
        })
    }
}

pub(crate) fn index_of(point: &[usize], size: usize) -> u64 {
    point
        .iter()
        .fold(0u64, |acc, &c| acc * size as u64 + c as u64)
}

pub(crate) fn point_of(mut index: u64, dims: usize, size: usize) -> Vec<usize> {
    let mut point = vec![0; dims];
    for axis in (0..dims).rev() {
        point[axis] = (index % size as u64) as usize;
        index /= size as u64;
    }
    point
}

/// One running episode over a shared instance.
#[derive(Clone, Debug)]
pub struct Episode<'a> {
    instance: &'a ConeInstance,
    position: Vec<usize>,
    steps: usize,
}

impl<'a> Episode<'a> {
    pub fn new(instance: &'a ConeInstance) -> Self {
        Self {
            instance,
            position: instance.start(),
            steps: 0,
        }
    }

    pub fn instance(&self) -> &'a ConeInstance {
        self.instance
    }

    pub fn reset(&mut self) -> Vec<f64> {
        self.position = self.instance.start();
        self.steps = 0;
        self.observation()
    }

    pub fn observation(&self) -> Vec<f64> {
        self.instance.observation(&self.position)
    }

    pub fn position(&self) -> &[usize] {
        &self.position
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Steps the episode; reaching `max_steps` without another terminal
    /// ends it with cause [`StepCause::StepLimit`] and the ordinary reward.
    pub fn step(&mut self, action: &[usize]) -> Result<StepResult> {
        let mut result = self.instance.step(&self.position, action)?;
        self.steps += 1;
        if result.cause == StepCause::Ongoing && self.steps >= self.instance.config.max_steps {
            result.cause = StepCause::StepLimit;
            result.done = true;
        }
        self.position.clone_from(&result.position);
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn no_pits_at_zero_fraction() {
        let inst = ConeInstance::build(ConeConfig::new(3, 5, 0.0, 1)).unwrap();
        assert_eq!(inst.num_pits(), 0);
    }

    #[test]
    fn full_pit_fraction_fills_interior() {
        let inst = ConeInstance::build(ConeConfig::new(2, 5, 1.0, 1)).unwrap();
        assert_eq!(inst.num_pits(), 9);
        for p in inst.pits() {
            assert!(p.iter().all(|&c| (1..=3).contains(&c)), "{p:?}");
        }
    }

    #[test]
    fn half_fraction_rounds() {
        let inst = ConeInstance::build(ConeConfig::new(2, 4, 0.5, 7)).unwrap();
        assert_eq!(inst.num_pits(), 2);
    }

    #[test]
    fn too_small_grid_is_config_error() {
        assert!(matches!(
            ConeInstance::build(ConeConfig::new(2, 2, 0.0, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn null_move_keeps_position() {
        let inst = ConeInstance::build(ConeConfig::new(2, 5, 0.0, 0)).unwrap();
        let r = inst.step(&[2, 1], &[0, 0, 0, 0]).unwrap();
        assert_eq!(r.position, vec![2, 1]);
        assert_eq!(r.reward, -inst.distance_to_goal(&[2, 1]));
        assert!(!r.done);
    }

    #[test]
    fn paired_movers_cancel() {
        let inst = ConeInstance::build(ConeConfig::new(2, 5, 0.0, 0)).unwrap();
        let r = inst.step(&[2, 1], &[1, 1, 1, 0]).unwrap();
        assert_eq!(r.position, vec![2, 2]);
    }

    #[test]
    fn reaching_goal_pays_bonus() {
        let inst = ConeInstance::build(ConeConfig::new(2, 5, 0.0, 0)).unwrap();
        let r = inst.step(&[3, 4], &[1, 0, 1, 0]).unwrap();
        assert_eq!(r.position, vec![4, 4]);
        assert_eq!(r.reward, 10.0);
        assert_eq!(r.cause, StepCause::Goal);
        assert!(r.done);
    }

    #[test]
    fn pit_pays_scaled_penalty() {
        let inst = ConeInstance::build(ConeConfig::new(2, 5, 1.0, 0)).unwrap();
        let r = inst.step(&[0, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!(r.cause, StepCause::Pit);
        assert!((r.reward + 10.0 * 32f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn malformed_action_is_contract_error() {
        let inst = ConeInstance::build(ConeConfig::new(2, 5, 0.0, 0)).unwrap();
        assert!(inst.step(&[0, 0], &[1, 0, 1]).is_err());
        assert!(inst.step(&[0, 0], &[2, 0, 1, 0]).is_err());
    }

    #[test]
    fn episode_hits_step_limit() {
        let mut cfg = ConeConfig::new(1, 5, 0.0, 0);
        cfg.max_steps = 3;
        let inst = ConeInstance::build(cfg).unwrap();
        let mut ep = Episode::new(&inst);
        for t in 0..3 {
            let r = ep.step(&[0, 1]).unwrap();
            assert_eq!(r.done, t == 2);
        }
        assert_eq!(ep.steps(), 3);
    }

    proptest! {
        #[test]
        fn positions_stay_on_grid(
            dims in 1usize..4,
            size in 3usize..7,
            actions in proptest::collection::vec(proptest::collection::vec(0usize..2, 6), 1..40),
        ) {
            let inst = ConeInstance::build(ConeConfig::new(dims, size, 0.0, 0)).unwrap();
            let mut pos = inst.start();
            for a in actions {
                let r = inst.step(&pos, &a[..2 * dims]).unwrap();
                prop_assert!(r.position.iter().all(|&c| c < size));
                prop_assert_eq!(r.done, r.cause != StepCause::Ongoing);
                pos = r.position;
            }
        }

        #[test]
        fn pit_layout_is_exact_and_interior(
            dims in 1usize..4,
            size in 3usize..7,
            fraction in 0.0f64..=1.0,
            seed in 0u64..1000,
        ) {
            let cfg = ConeConfig::new(dims, size, fraction, seed);
            let inst = ConeInstance::build(cfg.clone()).unwrap();
            let expected = (fraction * ((size - 2) as f64).powi(dims as i32)).round() as usize;
            prop_assert_eq!(inst.num_pits(), expected);
            for p in inst.pits() {
                prop_assert!(!inst.is_boundary(&p));
            }
            let again = ConeInstance::build(cfg).unwrap();
            prop_assert_eq!(inst.pits(), again.pits());
        }
    }
}
