//! Weighted log-likelihood training objectives.
//!
//! Every actor update maximizes `E[w(s, a) · log π(a|s)]` for some weight
//! `w`: normalized advantages for A2C, the clipped importance ratio for
//! PPO, and exponentiated advantages for offline AWR. All of them talk to
//! policies only through [`Policy`](crate::policy::Policy).

pub mod rollout;
pub mod train;
pub mod update;
pub mod value;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use rollout::{collect_rollout, compute_gae, EnvRunner, FinishedEpisode, RolloutBatch};
pub use train::{
    evaluate_policy, offline_samples, train_offline, train_online, EpisodeRecord, EvalReport,
    TrainOutcome,
};
pub use update::{
    a2c_update, awr_weights, offline_awr_update, ppo_update, LossReport, OfflineSample,
};
pub use value::ValueNet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    A2c,
    Ppo,
    OfflineAwr,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::A2c => "a2c",
            Objective::Ppo => "ppo",
            Objective::OfflineAwr => "offline_awr",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a2c" => Ok(Objective::A2c),
            "ppo" => Ok(Objective::Ppo),
            "offline_awr" => Ok(Objective::OfflineAwr),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub lr: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub ppo_clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub rollout_len: usize,
    pub minibatch: usize,
    pub epochs: usize,
    /// Environment step budget for online training.
    pub total_steps: usize,
    /// Optional cap on completed episodes; training stops at whichever
    /// budget is hit first.
    pub max_episodes: Option<usize>,
    pub awr_temperature: f64,
    pub awr_weight_cap: f64,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
    pub value_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::A2c,
            lr: 1e-3,
            discount: 0.99,
            gae_lambda: 0.95,
            ppo_clip: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            rollout_len: 32,
            minibatch: 64,
            epochs: 4,
            total_steps: 100_000,
            max_episodes: None,
            awr_temperature: 1.0,
            awr_weight_cap: 20.0,
            seed: 0,
            max_grad_norm: 1.0,
            value_hidden: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.discount) {
            return bad(format!("train.discount = {} outside [0, 1]", self.discount));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!(
                "train.gae_lambda = {} outside [0, 1]",
                self.gae_lambda
            ));
        }
        if !(self.ppo_clip > 0.0 && self.ppo_clip < 1.0) {
            return bad(format!("train.ppo_clip = {} outside (0, 1)", self.ppo_clip));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("entropy_coef", self.entropy_coef),
            ("value_coef", self.value_coef),
            ("max_grad_norm", self.max_grad_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("train.{name} = {v} must be a finite value >= 0"));
            }
        }
        if !(self.awr_temperature > 0.0) {
            return bad(format!(
                "train.awr_temperature = {} must be > 0",
                self.awr_temperature
            ));
        }
        if !(self.awr_weight_cap > 0.0) {
            return bad(format!(
                "train.awr_weight_cap = {} must be > 0",
                self.awr_weight_cap
            ));
        }
        for (name, v) in [
            ("rollout_len", self.rollout_len),
            ("minibatch", self.minibatch),
            ("epochs", self.epochs),
            ("value_hidden", self.value_hidden),
        ] {
            if v == 0 {
                return bad(format!("train.{name} must be positive"));
            }
        }
        Ok(())
    }
}

pub(crate) const ADAM_BETA1: f64 = 0.9;
pub(crate) const ADAM_BETA2: f64 = 0.999;
pub(crate) const ADAM_EPS: f64 = 1e-8;

/// Mean, min and max of a slice, for diagnostics.
pub(crate) fn summarize(xs: &[f64]) -> String {
    if xs.is_empty() {
        return "empty".into();
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let non_finite = xs.iter().filter(|x| !x.is_finite()).count();
    format!(
        "n={} mean={mean:.6} min={min:.6} max={max:.6} non_finite={non_finite}",
        xs.len()
    )
}
