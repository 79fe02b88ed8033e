//! Policies over joint actions made of `A` discrete sub-actions.
//!
//! Every policy class implements [`Policy`], so training code never needs
//! to know which architecture it is optimizing.

pub mod autoregressive;
pub mod checkpoint;
pub mod factorized;
pub mod flat;
pub mod saint;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::compute::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

pub use autoregressive::{ArConfig, AutoregressivePolicy};
pub use checkpoint::{load_policy, save_policy, Checkpoint};
pub use factorized::{FactorizedConfig, FactorizedPolicy};
pub use flat::{FlatConfig, FlatPolicy, MixedRadix, FLAT_GUARD};
pub use saint::{ConditioningMode, SaintConfig, SaintPolicy};

/// Random stream used for action sampling everywhere in the crate.
pub type PolicyRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyKind {
    Saint,
    Factorized,
    Autoregressive,
    Flat,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Saint => "saint",
            PolicyKind::Factorized => "factorized",
            PolicyKind::Autoregressive => "ar",
            PolicyKind::Flat => "flat",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saint" => Ok(PolicyKind::Saint),
            "factorized" => Ok(PolicyKind::Factorized),
            "ar" | "autoregressive" => Ok(PolicyKind::Autoregressive),
            "flat" => Ok(PolicyKind::Flat),
            other => Err(Error::Config(format!("unknown policy kind {other:?}"))),
        }
    }
}

/// Behavior contract shared by all policy classes.
pub trait Policy: Send + Sync {
    fn kind(&self) -> PolicyKind;

    /// Choice counts `K_1..K_A`.
    fn cardinalities(&self) -> &[usize];

    fn state_dim(&self) -> usize;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// Differentiable `(log π(a|s), entropy)` for one state.
    ///
    /// Entropy is exact for product-form and flat policies. The
    /// autoregressive policy returns the sum of its conditional entropies
    /// along the prefix of `action`, an unbiased estimate of the joint
    /// entropy when `action` was sampled from the policy.
    fn evaluate(&self, g: &mut Graph, state: &[f64], action: &[usize]) -> Result<(Var, Var)>;

    /// Draws a joint action and returns it with its log-probability.
    fn sample(&self, state: &[f64], rng: &mut PolicyRng) -> Result<(Vec<usize>, f64)>;

    /// A mode-seeking action (per-step argmax for sequential policies).
    fn greedy(&self, state: &[f64]) -> Result<Vec<usize>>;

    /// Architecture settings written to checkpoints, as `key=value` pairs.
    fn config_entries(&self) -> Vec<(String, String)>;

    fn log_prob(&self, state: &[f64], action: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let (lp, _) = self.evaluate(&mut g, state, action)?;
        g.scalar_value(lp)
    }

    fn num_params(&self) -> usize {
        self.params().num_scalars()
    }

    fn num_joint_actions(&self) -> u128 {
        self.cardinalities().iter().map(|&k| k as u128).product()
    }
}

/// Per-sub-action categorical distributions for one state.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyDistribution {
    pub logits: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
}

impl PolicyDistribution {
    pub fn from_logits(logits: Vec<Vec<f64>>) -> Self {
        let probs = logits.iter().map(|l| softmax(l)).collect();
        Self { logits, probs }
    }

    pub fn num_sub_actions(&self) -> usize {
        self.probs.len()
    }

    /// Independent draw from each sub-action's categorical.
    pub fn sample(&self, rng: &mut PolicyRng) -> Vec<usize> {
        self.probs
            .iter()
            .map(|p| sample_categorical(p, rng))
            .collect()
    }

    pub fn greedy(&self) -> Vec<usize> {
        self.probs.iter().map(|p| argmax(p)).collect()
    }

    /// `Σ_i log p_i[a_i]` from log-softmax of the logits.
    pub fn log_prob(&self, action: &[usize]) -> Result<f64> {
        check_action(action, &self.cardinalities())?;
        Ok(self
            .logits
            .iter()
            .zip(action)
            .map(|(l, &a)| log_softmax(l)[a])
            .sum())
    }

    /// Exact joint entropy of the product distribution, in nats.
    pub fn entropy(&self) -> f64 {
        self.logits
            .iter()
            .map(|l| {
                log_softmax(l)
                    .iter()
                    .map(|&lp| if lp.is_finite() { -lp.exp() * lp } else { 0.0 })
                    .sum::<f64>()
            })
            .sum()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.probs.iter().map(Vec::len).collect()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - lse).collect()
}

pub fn sample_categorical(probs: &[f64], rng: &mut PolicyRng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the final cumulative sum.
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

pub(crate) fn check_state(state: &[f64], expected: usize) -> Result<()> {
    if state.len() != expected {
        return Err(Error::Dimension {
            op: "policy state",
            lhs: vec![state.len()],
            rhs: vec![expected],
        });
    }
    Ok(())
}

pub(crate) fn check_action(action: &[usize], cardinalities: &[usize]) -> Result<()> {
    if action.len() != cardinalities.len() {
        return Err(Error::Contract(format!(
            "joint action has {} components, expected {}",
            action.len(),
            cardinalities.len()
        )));
    }
    for (i, (&a, &k)) in action.iter().zip(cardinalities).enumerate() {
        if a >= k {
            return Err(Error::Contract(format!(
                "sub-action {i} = {a} out of range 0..{k}"
            )));
        }
    }
    Ok(())
}

/// `(Σ_i log_softmax(logits_i)[a_i], Σ_i H_i)` over independent heads.
pub(crate) fn product_form_terms(
    g: &mut Graph,
    logits: &[Var],
    action: &[usize],
) -> Result<(Var, Var)> {
    let mut lps = Vec::with_capacity(logits.len());
    let mut ents = Vec::with_capacity(logits.len());
    for (&l, &a) in logits.iter().zip(action) {
        let (lp, ent) = categorical_terms(g, l, a)?;
        lps.push(lp);
        ents.push(ent);
    }
    Ok((g.add_n(&lps)?, g.add_n(&ents)?))
}

/// Log-probability of `index` and entropy of one categorical over a row of
/// logits.
pub(crate) fn categorical_terms(g: &mut Graph, logits: Var, index: usize) -> Result<(Var, Var)> {
    let lsm = g.log_softmax_rows(logits)?;
    let lp = g.pick(lsm, index)?;
    let p = g.exp(lsm);
    let plogp = g.mul(p, lsm)?;
    let s = g.sum(plogp);
    Ok((lp, g.scale(s, -1.0)))
}

/// Every joint action of a small space, in mixed-radix order.
pub fn enumerate_joint_actions(cardinalities: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = cardinalities.iter().product();
    let codec = MixedRadix::new(cardinalities.to_vec());
    (0..total).map(|i| codec.decode(i)).collect()
}
