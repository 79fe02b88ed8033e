//! Experiment runner: configuration, seeded runs, metrics and summaries.
//!
//! # Configuration keys
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `env.D` | required | grid axes |
//! | `env.M` | required | positions per axis |
//! | `env.pit_fraction` | required | share of interior points that are pits |
//! | `env.seed` | 0 | pit layout seed |
//! | `env.max_steps` | `4·D·M` | episode cap |
//! | `env.goal_bonus` | 10 | goal reward |
//! | `policy.class` | required | `saint`, `saint_ip`, `factorized`, `ar`, `flat` |
//! | `policy.d` | 16 | SAINT embedding width |
//! | `policy.L` / `policy.H` | 3 / 1 | SAINT blocks and heads |
//! | `policy.conditioning` | `film` | SAINT state conditioning |
//! | `policy.ip_count` | 4 for `saint_ip` | inducing points |
//! | `policy.film_hidden` / `policy.head_hidden` | `2d` / `d` | SAINT MLP widths |
//! | `policy.hidden` | `auto` | baseline trunk width; `auto` matches SAINT's parameter count |
//! | `train.*` | see [`TrainConfig`] | every `TrainConfig` field except `seed` |
//! | `run.seeds` | 0 | comma separated run seeds |
//! | `run.out_dir` | `runs` | output directory |
//!
//! `train.discount` is also the discount the oracle uses for `env`.

pub mod cli;
pub mod config;
pub mod gradsuite;
pub mod metrics;
pub mod run;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::cone::ConeConfig;
use crate::error::{Error, Result};
use crate::policy::{
    ArConfig, AutoregressivePolicy, ConditioningMode, FactorizedConfig, FactorizedPolicy,
    FlatConfig, FlatPolicy, Policy, SaintConfig, SaintPolicy,
};
use crate::rl::{Objective, TrainConfig};

pub use config::KvConfig;
pub use metrics::{
    aggregate, read_metrics, time_to_baseline, write_metrics, MetricsRow, SeedRun, Summary,
    TimeToBaseline,
};
pub use run::{run_experiment, run_offline, sweep, RunResult, SweepPlan};

pub const DEFAULT_IP_COUNT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyClass {
    Saint,
    SaintIp,
    Factorized,
    Ar,
    Flat,
}

impl PolicyClass {
    pub const ALL: [PolicyClass; 5] = [
        PolicyClass::Saint,
        PolicyClass::SaintIp,
        PolicyClass::Factorized,
        PolicyClass::Ar,
        PolicyClass::Flat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyClass::Saint => "saint",
            PolicyClass::SaintIp => "saint_ip",
            PolicyClass::Factorized => "factorized",
            PolicyClass::Ar => "ar",
            PolicyClass::Flat => "flat",
        }
    }

    pub fn is_saint(self) -> bool {
        matches!(self, PolicyClass::Saint | PolicyClass::SaintIp)
    }
}

impl fmt::Display for PolicyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy class {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicySpec {
    pub class: PolicyClass,
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub conditioning: ConditioningMode,
    pub ip_count: Option<usize>,
    pub film_hidden: usize,
    pub head_hidden: usize,
    /// Baseline trunk width; `None` selects it by parameter parity.
    pub hidden: Option<usize>,
}

impl PolicySpec {
    pub fn new(class: PolicyClass) -> Self {
        let d = SaintConfig::DEFAULT_D;
        Self {
            class,
            d,
            blocks: 3,
            heads: 1,
            conditioning: ConditioningMode::Film,
            ip_count: (class == PolicyClass::SaintIp).then_some(DEFAULT_IP_COUNT),
            film_hidden: 2 * d,
            head_hidden: d,
            hidden: None,
        }
    }

    pub fn saint_config(&self, cardinalities: Vec<usize>, state_dim: usize) -> SaintConfig {
        SaintConfig {
            cardinalities,
            d: self.d,
            state_dim,
            blocks: self.blocks,
            heads: self.heads,
            conditioning: self.conditioning,
            inducing_points: self.ip_count,
            film_hidden: self.film_hidden,
            head_hidden: self.head_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub env: ConeConfig,
    pub policy: PolicySpec,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

const KNOWN_PREFIXES: [&str; 4] = ["env.", "policy.", "train.", "run."];

impl ExperimentSpec {
    pub fn from_kv(c: &KvConfig) -> Result<Self> {
        let known = Self::keys();
        if let Some(k) = c.keys().find(|k| !known.contains(k)) {
            let hint = if KNOWN_PREFIXES.iter().any(|p| k.starts_with(p)) {
                ""
            } else {
                " (keys start with env., policy., train. or run.)"
            };
            return Err(Error::Config(format!("unknown field {k}{hint}")));
        }
        let dims: usize = c.require("env.D")?;
        let size: usize = c.require("env.M")?;
        let pit_fraction: f64 = c.require("env.pit_fraction")?;
        let train = train_config_from_kv(c)?;
        let mut env = ConeConfig::new(dims, size, pit_fraction, c.get_or("env.seed", 0)?);
        env.max_steps = c.get_or("env.max_steps", env.max_steps)?;
        env.goal_bonus = c.get_or("env.goal_bonus", env.goal_bonus)?;
        env.discount = train.discount;

        let class: PolicyClass = c.require("policy.class")?;
        let mut policy = PolicySpec::new(class);
        policy.d = c.get_or("policy.d", policy.d)?;
        policy.film_hidden = c.get_or("policy.film_hidden", 2 * policy.d)?;
        policy.head_hidden = c.get_or("policy.head_hidden", policy.d)?;
        policy.blocks = c.get_or("policy.L", policy.blocks)?;
        policy.heads = c.get_or("policy.H", policy.heads)?;
        policy.conditioning = c.get_or("policy.conditioning", policy.conditioning)?;
        if c.raw("policy.ip_count").is_some() {
            policy.ip_count = c.get_opt("policy.ip_count")?;
        }
        policy.hidden = match c.raw("policy.hidden") {
            None | Some("auto") => None,
            Some(_) => Some(c.require("policy.hidden")?),
        };
        let spec = Self {
            env,
            policy,
            train,
            seeds: c.get_list("run.seeds")?.unwrap_or_else(|| vec![0]),
            out_dir: PathBuf::from(c.get_or("run.out_dir", "runs".to_owned())?),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvConfig::parse(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("run.seeds is empty".into()));
        }
        match (self.policy.class, self.policy.ip_count) {
            (PolicyClass::SaintIp, None) => {
                return Err(Error::Config("saint_ip needs policy.ip_count".into()))
            }
            (PolicyClass::Saint, Some(_)) => {
                return Err(Error::Config(
                    "policy.ip_count is set; use policy.class = saint_ip".into(),
                ))
            }
            _ => {}
        }
        if self.policy.class.is_saint() {
            self.policy
                .saint_config(vec![2; self.env.num_sub_actions()], self.env.dims)
                .validate()?;
            if self.policy.blocks == 0 {
                return Err(Error::Config(
                    "policy.L must be at least 1 in experiments".into(),
                ));
            }
        }
        if self.policy.class == PolicyClass::Flat {
            FlatConfig::new(vec![2; self.env.num_sub_actions()], self.env.dims, 1).validate()?;
        }
        Ok(())
    }

    /// Every accepted key, in rendering order.
    pub fn keys() -> Vec<&'static str> {
        vec![
            "env.D",
            "env.M",
            "env.pit_fraction",
            "env.seed",
            "env.max_steps",
            "env.goal_bonus",
            "policy.class",
            "policy.d",
            "policy.L",
            "policy.H",
            "policy.conditioning",
            "policy.ip_count",
            "policy.film_hidden",
            "policy.head_hidden",
            "policy.hidden",
            "train.objective",
            "train.lr",
            "train.discount",
            "train.gae_lambda",
            "train.ppo_clip",
            "train.entropy_coef",
            "train.value_coef",
            "train.rollout_len",
            "train.minibatch",
            "train.epochs",
            "train.total_steps",
            "train.max_episodes",
            "train.awr_temperature",
            "train.awr_weight_cap",
            "train.max_grad_norm",
            "train.value_hidden",
            "run.seeds",
            "run.out_dir",
        ]
    }

    /// Fully resolved entries; parsing them back yields an equal spec.
    pub fn entries(&self) -> Vec<(String, String)> {
        let f = |x: f64| format!("{x:?}");
        let opt = |x: Option<usize>| x.map_or("none".to_owned(), |v| v.to_string());
        let p = &self.policy;
        let t = &self.train;
        let values = vec![
            self.env.dims.to_string(),
            self.env.size.to_string(),
            f(self.env.pit_fraction),
            self.env.seed.to_string(),
            self.env.max_steps.to_string(),
            f(self.env.goal_bonus),
            p.class.to_string(),
            p.d.to_string(),
            p.blocks.to_string(),
            p.heads.to_string(),
            p.conditioning.to_string(),
            opt(p.ip_count),
            p.film_hidden.to_string(),
            p.head_hidden.to_string(),
            p.hidden.map_or("auto".to_owned(), |h| h.to_string()),
            t.objective.to_string(),
            f(t.lr),
            f(t.discount),
            f(t.gae_lambda),
            f(t.ppo_clip),
            f(t.entropy_coef),
            f(t.value_coef),
            t.rollout_len.to_string(),
            t.minibatch.to_string(),
            t.epochs.to_string(),
            t.total_steps.to_string(),
            opt(t.max_episodes),
            f(t.awr_temperature),
            f(t.awr_weight_cap),
            f(t.max_grad_norm),
            t.value_hidden.to_string(),
            self.seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(","),
            self.out_dir.display().to_string(),
        ];
        Self::keys()
            .into_iter()
            .map(str::to_owned)
            .zip(values)
            .collect()
    }

    pub fn render(&self) -> String {
        config::render(&self.entries())
    }

    /// Entries that identify a configuration for aggregation: everything
    /// except seeds and output location.
    pub fn identity(&self) -> String {
        self.entries()
            .into_iter()
            .filter(|(k, _)| !k.starts_with("run."))
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }

    /// Environment-only identity, used to check comparable runs.
    pub fn env_identity(&self) -> String {
        self.entries()
            .into_iter()
            .filter(|(k, _)| k.starts_with("env.") || k == "train.discount")
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        vec![2; self.env.num_sub_actions()]
    }

    /// Baseline trunk width: the explicit setting or the parity choice.
    pub fn baseline_hidden(&self) -> Result<Parity> {
        let cards = self.cardinalities();
        let target = saint_default_params(&cards, self.env.dims)?;
        match self.policy.hidden {
            Some(h) => {
                let count = baseline_param_count(self.policy.class, &cards, self.env.dims, h)?;
                Ok(Parity::new(h, count, target))
            }
            None => parity_width(self.policy.class, &cards, self.env.dims, target),
        }
    }

    /// Builds the policy for one run seed.
    pub fn build_policy(&self, seed: u64) -> Result<Box<dyn Policy>> {
        let cards = self.cardinalities();
        let ds = self.env.dims;
        Ok(match self.policy.class {
            PolicyClass::Saint | PolicyClass::SaintIp => Box::new(SaintPolicy::init(
                self.policy.saint_config(cards, ds),
                seed,
            )?),
            PolicyClass::Factorized => {
                let hidden = self.baseline_hidden()?.hidden;
                Box::new(FactorizedPolicy::init(
                    FactorizedConfig {
                        cardinalities: cards,
                        state_dim: ds,
                        hidden,
                    },
                    seed,
                )?)
            }
            PolicyClass::Ar => {
                let hidden = self.baseline_hidden()?.hidden;
                Box::new(AutoregressivePolicy::init(
                    ArConfig {
                        cardinalities: cards,
                        state_dim: ds,
                        hidden,
                    },
                    seed,
                )?)
            }
            PolicyClass::Flat => {
                FlatConfig::new(cards.clone(), ds, 1).validate()?;
                let hidden = self.baseline_hidden()?.hidden;
                Box::new(FlatPolicy::init(FlatConfig::new(cards, ds, hidden), seed)?)
            }
        })
    }

    /// A spec with defaults for everything but the required fields.
    pub fn minimal(env: ConeConfig, class: PolicyClass) -> Self {
        let train = TrainConfig {
            discount: env.discount,
            ..TrainConfig::default()
        };
        Self {
            env,
            policy: PolicySpec::new(class),
            train,
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
        }
    }

    pub fn objective(&self) -> Objective {
        self.train.objective
    }
}

/// The `train.*` section; `seed` stays at its default because run seeds
/// come from `run.seeds`.
pub fn train_config_from_kv(c: &KvConfig) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        objective: c.get_or("train.objective", d.objective)?,
        lr: c.get_or("train.lr", d.lr)?,
        discount: c.get_or("train.discount", d.discount)?,
        gae_lambda: c.get_or("train.gae_lambda", d.gae_lambda)?,
        ppo_clip: c.get_or("train.ppo_clip", d.ppo_clip)?,
        entropy_coef: c.get_or("train.entropy_coef", d.entropy_coef)?,
        value_coef: c.get_or("train.value_coef", d.value_coef)?,
        rollout_len: c.get_or("train.rollout_len", d.rollout_len)?,
        minibatch: c.get_or("train.minibatch", d.minibatch)?,
        epochs: c.get_or("train.epochs", d.epochs)?,
        total_steps: c.get_or("train.total_steps", d.total_steps)?,
        max_episodes: c.get_opt("train.max_episodes")?,
        awr_temperature: c.get_or("train.awr_temperature", d.awr_temperature)?,
        awr_weight_cap: c.get_or("train.awr_weight_cap", d.awr_weight_cap)?,
        seed: d.seed,
        max_grad_norm: c.get_or("train.max_grad_norm", d.max_grad_norm)?,
        value_hidden: c.get_or("train.value_hidden", d.value_hidden)?,
    })
}

/// Result of matching a baseline's width to SAINT's parameter count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Parity {
    pub hidden: usize,
    pub params: usize,
    pub target: usize,
}

impl Parity {
    fn new(hidden: usize, params: usize, target: usize) -> Self {
        Self {
            hidden,
            params,
            target,
        }
    }

    /// Relative deviation from the target count.
    pub fn deviation(&self) -> f64 {
        (self.params as f64 - self.target as f64) / self.target as f64
    }

    pub fn within(&self, tolerance: f64) -> bool {
        self.deviation().abs() <= tolerance
    }
}

/// Parameter count of the default SAINT configuration for this action
/// space and state width.
pub fn saint_default_params(cardinalities: &[usize], state_dim: usize) -> Result<usize> {
    Ok(SaintPolicy::init(SaintConfig::new(cardinalities.to_vec(), state_dim), 0)?.num_params())
}

pub fn baseline_param_count(
    class: PolicyClass,
    cardinalities: &[usize],
    state_dim: usize,
    hidden: usize,
) -> Result<usize> {
    match class {
        PolicyClass::Factorized => Ok(FactorizedConfig::count_for(
            cardinalities,
            state_dim,
            hidden,
        )),
        PolicyClass::Ar => Ok(ArConfig::count_for(cardinalities, state_dim, hidden)),
        PolicyClass::Flat => Ok(FlatConfig::count_for(cardinalities, state_dim, hidden)),
        other => Err(Error::Config(format!("{other} has no trunk width"))),
    }
}

/// Smallest-deviation trunk width for a baseline class. Counts grow
/// monotonically with width, so the scan stops once it overshoots.
pub fn parity_width(
    class: PolicyClass,
    cardinalities: &[usize],
    state_dim: usize,
    target: usize,
) -> Result<Parity> {
    let mut best = Parity::new(
        1,
        baseline_param_count(class, cardinalities, state_dim, 1)?,
        target,
    );
    for h in 2..=4096 {
        let count = baseline_param_count(class, cardinalities, state_dim, h)?;
        let cand = Parity::new(h, count, target);
        if cand.deviation().abs() < best.deviation().abs() {
            best = cand;
        }
        if count > target {
            break;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "env.D = 2\nenv.M = 5\nenv.pit_fraction = 0.25\npolicy.class = saint\n";

    #[test]
    fn minimal_config_resolves_defaults() {
        let spec = ExperimentSpec::parse(MINIMAL).unwrap();
        assert_eq!(spec.env.max_steps, 40);
        assert_eq!(spec.policy.blocks, 3);
        assert_eq!(spec.policy.heads, 1);
        assert_eq!(spec.seeds, vec![0]);
    }

    #[test]
    fn render_parse_round_trip_is_lossless() {
        let text = format!(
            "{MINIMAL}train.lr = 0.00031\ntrain.max_episodes = 17\nrun.seeds = 3,1,4\npolicy.conditioning = xattn_post\n"
        );
        let spec = ExperimentSpec::parse(&text).unwrap();
        let back = ExperimentSpec::parse(&spec.render()).unwrap();
        assert_eq!(spec, back);
        for class in PolicyClass::ALL {
            let mut s = ExperimentSpec::minimal(ConeConfig::new(2, 4, 0.5, 9), class);
            s.train.discount = 0.9;
            s.env.discount = 0.9;
            s.policy.hidden = Some(33);
            assert_eq!(ExperimentSpec::parse(&s.render()).unwrap(), s, "{class}");
        }
    }

    #[test]
    fn missing_env_field_is_named() {
        let err = ExperimentSpec::parse("env.M = 5\nenv.pit_fraction = 0\npolicy.class = saint\n")
            .unwrap_err();
        assert!(err.to_string().contains("env.D"), "{err}");
    }

    #[test]
    fn unknown_key_is_refused() {
        let err = ExperimentSpec::parse(&format!("{MINIMAL}env.size = 3\n")).unwrap_err();
        assert!(err.to_string().contains("env.size"), "{err}");
    }

    #[test]
    fn flat_over_guard_is_refused() {
        let text = "env.D = 11\nenv.M = 3\nenv.pit_fraction = 0\npolicy.class = flat\n";
        assert!(matches!(
            ExperimentSpec::parse(text),
            Err(Error::Refused(_))
        ));
    }

    #[test]
    fn baselines_match_saint_capacity_within_a_quarter() {
        for dims in [2, 4, 7] {
            let cards = vec![2; 2 * dims];
            let target = saint_default_params(&cards, dims).unwrap();
            for class in [PolicyClass::Factorized, PolicyClass::Ar] {
                let p = parity_width(class, &cards, dims, target).unwrap();
                assert!(p.within(0.25), "{class} D={dims}: {p:?}");
            }
        }
        let cards = vec![2; 4];
        let p = parity_width(
            PolicyClass::Flat,
            &cards,
            2,
            saint_default_params(&cards, 2).unwrap(),
        )
        .unwrap();
        assert!(p.within(0.25), "{p:?}");
    }

    #[test]
    fn built_policies_have_the_reported_width() {
        let mut spec = ExperimentSpec::minimal(ConeConfig::new(4, 5, 0.0, 0), PolicyClass::Ar);
        let parity = spec.baseline_hidden().unwrap();
        assert_eq!(spec.build_policy(0).unwrap().num_params(), parity.params);
        spec.policy.class = PolicyClass::SaintIp;
        spec.policy.ip_count = Some(DEFAULT_IP_COUNT);
        assert!(spec
            .build_policy(0)
            .unwrap()
            .params()
            .contains("block0.isab.points"));
    }
}
