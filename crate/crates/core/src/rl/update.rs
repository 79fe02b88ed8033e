//! Actor and critic updates.
//!
//! Losses are accumulated one state at a time: each sample builds its own
//! graph, contributes `loss_i / N` and back-propagates into the policy's
//! gradient buffers before a single optimizer step.

use rand::seq::SliceRandom;

use super::rollout::RolloutBatch;
use super::{summarize, Objective, TrainConfig, ValueNet, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::compute::{backward, Graph, Var};
use crate::error::{Error, Result};
use crate::policy::{Policy, PolicyRng};

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct LossReport {
    pub objective: Objective,
    pub samples: usize,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub mean_entropy: f64,
    /// Actor gradient norm before clipping.
    pub grad_norm: f64,
    /// PPO: share of samples whose ratio left `[1-ε, 1+ε]`.
    pub clip_fraction: f64,
    /// AWR: mean sample weight.
    pub mean_weight: f64,
}

impl LossReport {
    fn new(objective: Objective, samples: usize) -> Self {
        Self {
            objective,
            samples,
            actor_loss: 0.0,
            critic_loss: 0.0,
            mean_entropy: 0.0,
            grad_norm: 0.0,
            clip_fraction: 0.0,
            mean_weight: 0.0,
        }
    }
}

/// One logged transition prepared for offline training.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineSample {
    pub state: Vec<f64>,
    pub action: Vec<usize>,
    /// Discounted return-to-go within the logged episode.
    pub ret: f64,
}

struct ActorPass {
    loss: f64,
    mean_entropy: f64,
    log_probs: Vec<f64>,
}

/// Accumulates `Σ_i term_i` into the policy's gradient buffers, where
/// `term(g, i, log_prob_i, entropy_i)` already carries its `1/N` factor.
fn actor_pass<'s>(
    policy: &mut dyn Policy,
    items: impl ExactSizeIterator<Item = (&'s [f64], &'s [usize])>,
    mut term: impl FnMut(&mut Graph, usize, Var, Var) -> Result<Var>,
    diagnostics: &dyn Fn() -> String,
) -> Result<ActorPass> {
    let n = items.len();
    policy.params_mut().zero_grads();
    let mut pass = ActorPass {
        loss: 0.0,
        mean_entropy: 0.0,
        log_probs: Vec::with_capacity(n),
    };
    for (i, (state, action)) in items.enumerate() {
        let mut g = Graph::new();
        let (lp, ent) = policy.evaluate(&mut g, state, action)?;
        let loss = term(&mut g, i, lp, ent)?;
        let value = g.scalar_value(loss)?;
        let lp_value = g.scalar_value(lp)?;
        if !value.is_finite() || !lp_value.is_finite() {
            return Err(Error::NonFinite(format!(
                "actor loss term {value} (log-prob {lp_value}) at sample {i} of {n}; {}",
                diagnostics()
            )));
        }
        pass.loss += value;
        pass.mean_entropy += g.scalar_value(ent)? / n as f64;
        pass.log_probs.push(lp_value);
        backward(&g, loss, policy.params_mut())?;
    }
    Ok(pass)
}

fn optimizer_step(policy: &mut dyn Policy, cfg: &TrainConfig) -> Result<f64> {
    let params = policy.params_mut();
    let norm = if cfg.max_grad_norm > 0.0 {
        params.clip_grad_norm(cfg.max_grad_norm)
    } else {
        params.grad_norm()
    };
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("actor gradient norm {norm}")));
    }
    params.adam_step(cfg.lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)?;
    Ok(norm)
}

fn batch_diagnostics(batch: &RolloutBatch) -> String {
    format!(
        "rewards [{}], values [{}], advantages [{}], returns [{}], log-probs [{}]",
        summarize(&batch.rewards),
        summarize(&batch.values),
        summarize(&batch.advantages),
        summarize(&batch.returns),
        summarize(&batch.log_probs)
    )
}

fn require_prepared(batch: &RolloutBatch) -> Result<()> {
    batch.check_consistent()?;
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if batch.advantages.len() != batch.len() || batch.returns.len() != batch.len() {
        return Err(Error::Contract(
            "batch has no advantages; run compute_gae first".into(),
        ));
    }
    Ok(())
}

/// Advantage actor-critic: actor loss `-mean(Â·log π) - c_H·mean(H)`,
/// critic loss `mean((V - R)²)`, one optimizer step each.
pub fn a2c_update(
    policy: &mut dyn Policy,
    value: &mut ValueNet,
    batch: &RolloutBatch,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    require_prepared(batch)?;
    let n = batch.len() as f64;
    let items = batch
        .states
        .iter()
        .zip(&batch.actions)
        .map(|(s, a)| (s.as_slice(), a.as_slice()));
    let pass = actor_pass(
        policy,
        items,
        |g, i, lp, ent| {
            let pg = g.scale(lp, -batch.advantages[i] / n);
            let bonus = g.scale(ent, -cfg.entropy_coef / n);
            g.add(pg, bonus)
        },
        &|| batch_diagnostics(batch),
    )?;
    let mut report = LossReport::new(Objective::A2c, batch.len());
    report.actor_loss = pass.loss;
    report.mean_entropy = pass.mean_entropy;
    report.grad_norm = optimizer_step(policy, cfg)?;
    report.critic_loss = value.regress(
        &batch.states,
        &batch.returns,
        cfg.value_coef,
        cfg.lr,
        cfg.max_grad_norm,
    )?;
    Ok(report)
}

/// Clipped-surrogate PPO over `epochs` shuffled passes of minibatches.
/// The ratio is taken on joint log-probabilities, one per joint action.
/// Returns one report per minibatch step, in order.
pub fn ppo_update(
    policy: &mut dyn Policy,
    value: &mut ValueNet,
    batch: &RolloutBatch,
    cfg: &TrainConfig,
    rng: &mut PolicyRng,
) -> Result<Vec<LossReport>> {
    require_prepared(batch)?;
    let eps = cfg.ppo_clip;
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut reports = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch) {
            let n = chunk.len() as f64;
            let items = chunk
                .iter()
                .map(|&i| (batch.states[i].as_slice(), batch.actions[i].as_slice()));
            let mut clipped = 0usize;
            let pass = actor_pass(
                policy,
                items,
                |g, k, lp, ent| {
                    let i = chunk[k];
                    let adv = batch.advantages[i];
                    let log_ratio = g.add_scalar(lp, -batch.log_probs[i]);
                    let ratio = g.exp(log_ratio);
                    let r = g.scalar_value(ratio)?;
                    if (r - 1.0).abs() > eps {
                        clipped += 1;
                    }
                    let unclipped = g.scale(ratio, adv);
                    let bounded = g.clamp(ratio, 1.0 - eps, 1.0 + eps);
                    let bounded = g.scale(bounded, adv);
                    let surrogate = g.minimum(unclipped, bounded)?;
                    let surrogate = g.scale(surrogate, -1.0 / n);
                    let bonus = g.scale(ent, -cfg.entropy_coef / n);
                    g.add(surrogate, bonus)
                },
                &|| batch_diagnostics(batch),
            )?;
            let mut report = LossReport::new(Objective::Ppo, chunk.len());
            report.actor_loss = pass.loss;
            report.mean_entropy = pass.mean_entropy;
            report.clip_fraction = clipped as f64 / n;
            report.grad_norm = optimizer_step(policy, cfg)?;
            let states: Vec<Vec<f64>> = chunk.iter().map(|&i| batch.states[i].clone()).collect();
            let returns: Vec<f64> = chunk.iter().map(|&i| batch.returns[i]).collect();
            report.critic_loss =
                value.regress(&states, &returns, cfg.value_coef, cfg.lr, cfg.max_grad_norm)?;
            reports.push(report);
        }
    }
    Ok(reports)
}

/// `w = min(exp(Â / temperature), cap)`.
pub fn awr_weights(advantages: &[f64], temperature: f64, cap: f64) -> Vec<f64> {
    advantages
        .iter()
        .map(|a| (a / temperature).exp().min(cap))
        .collect()
}

/// Advantage-weighted regression on logged data:
/// actor loss `-mean(w·log π(a|s))` with `Â = R - V(s)`, then one critic
/// regression step towards the logged returns.
pub fn offline_awr_update(
    policy: &mut dyn Policy,
    value: &mut ValueNet,
    samples: &[OfflineSample],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    if samples.is_empty() {
        return Err(Error::Contract("offline update on an empty dataset".into()));
    }
    let states: Vec<Vec<f64>> = samples.iter().map(|s| s.state.clone()).collect();
    let returns: Vec<f64> = samples.iter().map(|s| s.ret).collect();
    let values = value.predict(&states)?;
    let advantages: Vec<f64> = returns.iter().zip(&values).map(|(r, v)| r - v).collect();
    let weights = awr_weights(&advantages, cfg.awr_temperature, cfg.awr_weight_cap);
    let n = samples.len() as f64;
    let diagnostics = || {
        format!(
            "returns [{}], values [{}], weights [{}]",
            summarize(&returns),
            summarize(&values),
            summarize(&weights)
        )
    };
    let items = samples
        .iter()
        .map(|s| (s.state.as_slice(), s.action.as_slice()));
    let pass = actor_pass(
        policy,
        items,
        |g, i, lp, _| Ok(g.scale(lp, -weights[i] / n)),
        &diagnostics,
    )?;
    let mut report = LossReport::new(Objective::OfflineAwr, samples.len());
    report.actor_loss = pass.loss;
    report.mean_entropy = pass.mean_entropy;
    report.mean_weight = weights.iter().sum::<f64>() / n;
    report.grad_norm = optimizer_step(policy, cfg)?;
    report.critic_loss =
        value.regress(&states, &returns, cfg.value_coef, cfg.lr, cfg.max_grad_norm)?;
    Ok(report)
}
