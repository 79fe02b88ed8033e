//! Sequential policy `π(a|s) = Π_i π_i(a_i | s, a_<i)` under the fixed
//! order `1..A`.
//!
//! Step `i` adds the learned embeddings of the already chosen prefix
//! `a_<i` to the trunk's second pre-activation, applies GELU and reads
//! sub-action `i`'s logits from its own linear head. With `A = 1` this is
//! exactly the factorized architecture.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::factorized::join_list;
use super::saint::{check_same_layout, parse_usize_list};
use super::{
    argmax, categorical_terms, check_action, check_state, log_softmax, sample_categorical, softmax,
    Policy, PolicyKind, PolicyRng,
};
use crate::compute::nn::{init_linear, linear};
use crate::compute::params::normal;
use crate::compute::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ArConfig {
    pub cardinalities: Vec<usize>,
    pub state_dim: usize,
    pub hidden: usize,
}

impl ArConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cardinalities.is_empty() || self.cardinalities.iter().any(|&k| k < 2) {
            return Err(Error::Config(format!(
                "invalid cardinalities {:?}",
                self.cardinalities
            )));
        }
        if self.state_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("widths must be positive".into()));
        }
        Ok(())
    }

    pub fn count_for(cardinalities: &[usize], state_dim: usize, hidden: usize) -> usize {
        let trunk = state_dim * hidden + hidden + hidden * hidden + hidden;
        let heads: usize = cardinalities.iter().map(|&k| hidden * k + k).sum();
        let a = cardinalities.len();
        let prefix: usize = cardinalities[..a - 1].iter().map(|&k| k * hidden).sum();
        trunk + heads + prefix
    }
}

#[derive(Clone, Debug)]
pub struct AutoregressivePolicy {
    config: ArConfig,
    params: ParamStore,
}

impl AutoregressivePolicy {
    pub fn init(config: ArConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let h = config.hidden;
        init_linear(&mut p, &mut rng, "trunk.l1", config.state_dim, h)?;
        init_linear(&mut p, &mut rng, "trunk.l2", h, h)?;
        for (i, &k) in config.cardinalities.iter().enumerate() {
            init_linear(&mut p, &mut rng, &format!("head{i}"), h, k)?;
        }
        let a = config.cardinalities.len();
        for (i, &k) in config.cardinalities[..a - 1].iter().enumerate() {
            p.insert(
                format!("prefix{i}"),
                normal(&mut rng, &[k, h], 1.0 / (h as f64).sqrt()),
            )?;
        }
        Ok(Self { config, params: p })
    }

    pub fn from_parts(config: ArConfig, params: ParamStore) -> Result<Self> {
        let template = Self::init(config.clone(), 0)?;
        check_same_layout(&template.params, &params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ArConfig {
        &self.config
    }

    /// Runs the sequential decoder, choosing each sub-action with `choose`
    /// from that step's logits. Returns the chosen action and the logits
    /// node of every step.
    fn unroll(
        &self,
        g: &mut Graph,
        state: &[f64],
        mut choose: impl FnMut(usize, &[f64]) -> Result<usize>,
    ) -> Result<(Vec<usize>, Vec<Var>)> {
        check_state(state, self.config.state_dim)?;
        let p = &self.params;
        let s = g.constant(Tensor::new(vec![1, state.len()], state.to_vec())?);
        let h1 = linear(g, p, "trunk.l1", s)?;
        let h1 = g.gelu(h1);
        let mut pre = linear(g, p, "trunk.l2", h1)?;
        let a = self.config.cardinalities.len();
        let mut action = Vec::with_capacity(a);
        let mut logits = Vec::with_capacity(a);
        for i in 0..a {
            let z = g.gelu(pre);
            let l = linear(g, p, &format!("head{i}"), z)?;
            let ai = choose(i, g.value(l).data())?;
            action.push(ai);
            logits.push(l);
            if i + 1 < a {
                let table = g.param(p, &format!("prefix{i}"))?;
                let e = g.slice_rows(table, ai, 1)?;
                pre = g.add(pre, e)?;
            }
        }
        Ok((action, logits))
    }

    /// `π_i(·|s, a_<i)` for the prefix taken from `action`.
    pub fn conditional(&self, state: &[f64], action: &[usize], i: usize) -> Result<Vec<f64>> {
        check_action(action, &self.config.cardinalities)?;
        let mut g = Graph::new();
        let (_, logits) = self.unroll(&mut g, state, |j, _| Ok(action[j]))?;
        Ok(softmax(g.value(logits[i]).data()))
    }

    pub(crate) fn from_entries(get: &dyn Fn(&str) -> Result<String>) -> Result<ArConfig> {
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|e| Error::parse(k, format!("{e}")))
        };
        let cfg = ArConfig {
            cardinalities: parse_usize_list("cardinalities", &get("cardinalities")?)?,
            state_dim: num("state_dim")?,
            hidden: num("hidden")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Policy for AutoregressivePolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Autoregressive
    }

    fn cardinalities(&self) -> &[usize] {
        &self.config.cardinalities
    }

    fn state_dim(&self) -> usize {
        self.config.state_dim
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn evaluate(&self, g: &mut Graph, state: &[f64], action: &[usize]) -> Result<(Var, Var)> {
        check_action(action, &self.config.cardinalities)?;
        let (_, logits) = self.unroll(g, state, |i, _| Ok(action[i]))?;
        let mut lps = Vec::with_capacity(logits.len());
        let mut ents = Vec::with_capacity(logits.len());
        for (&l, &a) in logits.iter().zip(action) {
            let (lp, ent) = categorical_terms(g, l, a)?;
            lps.push(lp);
            ents.push(ent);
        }
        Ok((g.add_n(&lps)?, g.add_n(&ents)?))
    }

    fn sample(&self, state: &[f64], rng: &mut PolicyRng) -> Result<(Vec<usize>, f64)> {
        let mut g = Graph::new();
        let mut lp = 0.0;
        let (action, _) = self.unroll(&mut g, state, |_, logits| {
            let a = sample_categorical(&softmax(logits), rng);
            lp += log_softmax(logits)[a];
            Ok(a)
        })?;
        Ok((action, lp))
    }

    fn greedy(&self, state: &[f64]) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let (action, _) = self.unroll(&mut g, state, |_, logits| Ok(argmax(logits)))?;
        Ok(action)
    }

    fn config_entries(&self) -> Vec<(String, String)> {
        vec![
            (
                "cardinalities".into(),
                join_list(&self.config.cardinalities),
            ),
            ("state_dim".into(), self.config.state_dim.to_string()),
            ("hidden".into(), self.config.hidden.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{enumerate_joint_actions, FactorizedConfig, FactorizedPolicy};

    fn policy(cards: Vec<usize>, seed: u64) -> AutoregressivePolicy {
        AutoregressivePolicy::init(
            ArConfig {
                cardinalities: cards,
                state_dim: 2,
                hidden: 8,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn single_sub_action_reduces_to_factorized() {
        let ar = policy(vec![3], 4);
        let fact = FactorizedPolicy::from_parts(
            FactorizedConfig {
                cardinalities: vec![3],
                state_dim: 2,
                hidden: 8,
            },
            ar.params().clone(),
        )
        .unwrap();
        let s = [0.25, 0.75];
        let dist = fact.forward(&s).unwrap();
        for a in 0..3 {
            let lp = ar.log_prob(&s, &[a]).unwrap();
            assert_eq!(lp, dist.log_prob(&[a]).unwrap());
        }
    }

    #[test]
    fn joint_distribution_normalizes() {
        let ar = policy(vec![2, 2, 2], 9);
        let s = [0.1, 0.9];
        let total: f64 = enumerate_joint_actions(&[2, 2, 2])
            .iter()
            .map(|a| ar.log_prob(&s, a).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-8);
    }

    #[test]
    fn later_steps_depend_on_prefix() {
        let ar = policy(vec![2, 2], 2);
        let s = [0.5, 0.5];
        let after0 = ar.conditional(&s, &[0, 0], 1).unwrap();
        let after1 = ar.conditional(&s, &[1, 0], 1).unwrap();
        assert_ne!(after0, after1);
    }

    #[test]
    fn sampled_log_prob_matches_teacher_forcing() {
        let ar = policy(vec![2, 3, 2], 5);
        let mut rng = <PolicyRng as rand::SeedableRng>::seed_from_u64(1);
        let s = [0.3, 0.6];
        for _ in 0..20 {
            let (a, lp) = ar.sample(&s, &mut rng).unwrap();
            assert!((ar.log_prob(&s, &a).unwrap() - lp).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_is_contract_error() {
        let ar = policy(vec![2, 2], 0);
        assert!(matches!(
            ar.log_prob(&[0.0, 0.0], &[0, 5]),
            Err(Error::Contract(_))
        ));
    }
}
