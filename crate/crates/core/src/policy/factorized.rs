//! Conditionally independent sub-action heads on a shared state trunk.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::saint::{check_same_layout, parse_usize_list};
use super::{
    check_action, check_state, product_form_terms, Policy, PolicyDistribution, PolicyKind,
    PolicyRng,
};
use crate::compute::nn::{init_linear, linear};
use crate::compute::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedConfig {
    pub cardinalities: Vec<usize>,
    pub state_dim: usize,
    pub hidden: usize,
}

impl FactorizedConfig {
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

    /// Scalar parameter count for a given trunk width.
    pub fn count_for(cardinalities: &[usize], state_dim: usize, hidden: usize) -> usize {
        let trunk = state_dim * hidden + hidden + hidden * hidden + hidden;
        let heads: usize = cardinalities.iter().map(|&k| hidden * k + k).sum();
        trunk + heads
    }
}

/// `π(a|s) = Π_i π_i(a_i|s)` with a two-layer GELU trunk and one linear
/// head per sub-action. No pathway connects one head to another.
#[derive(Clone, Debug)]
pub struct FactorizedPolicy {
    config: FactorizedConfig,
    params: ParamStore,
}

impl FactorizedPolicy {
    pub fn init(config: FactorizedConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        init_linear(
            &mut p,
            &mut rng,
            "trunk.l1",
            config.state_dim,
            config.hidden,
        )?;
        init_linear(&mut p, &mut rng, "trunk.l2", config.hidden, config.hidden)?;
        for (i, &k) in config.cardinalities.iter().enumerate() {
            init_linear(&mut p, &mut rng, &format!("head{i}"), config.hidden, k)?;
        }
        Ok(Self { config, params: p })
    }

    pub fn from_parts(config: FactorizedConfig, params: ParamStore) -> Result<Self> {
        let template = Self::init(config.clone(), 0)?;
        check_same_layout(&template.params, &params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &FactorizedConfig {
        &self.config
    }

    pub(crate) fn trunk(&self, g: &mut Graph, state: &[f64]) -> Result<Var> {
        check_state(state, self.config.state_dim)?;
        let s = g.constant(Tensor::new(vec![1, state.len()], state.to_vec())?);
        let h = linear(g, &self.params, "trunk.l1", s)?;
        let h = g.gelu(h);
        let h = linear(g, &self.params, "trunk.l2", h)?;
        Ok(g.gelu(h))
    }

    pub fn logits_graph(&self, g: &mut Graph, state: &[f64]) -> Result<Vec<Var>> {
        let z = self.trunk(g, state)?;
        (0..self.config.cardinalities.len())
            .map(|i| linear(g, &self.params, &format!("head{i}"), z))
            .collect()
    }

    pub fn forward(&self, state: &[f64]) -> Result<PolicyDistribution> {
        let mut g = Graph::new();
        let logits = self.logits_graph(&mut g, state)?;
        Ok(PolicyDistribution::from_logits(
            logits
                .into_iter()
                .map(|l| g.value(l).data().to_vec())
                .collect(),
        ))
    }

    pub(crate) fn from_entries(get: &dyn Fn(&str) -> Result<String>) -> Result<FactorizedConfig> {
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|e| Error::parse(k, format!("{e}")))
        };
        let cfg = FactorizedConfig {
            cardinalities: parse_usize_list("cardinalities", &get("cardinalities")?)?,
            state_dim: num("state_dim")?,
            hidden: num("hidden")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn join_list(xs: &[usize]) -> String {
    xs.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl Policy for FactorizedPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Factorized
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
        let logits = self.logits_graph(g, state)?;
        product_form_terms(g, &logits, action)
    }

    fn sample(&self, state: &[f64], rng: &mut PolicyRng) -> Result<(Vec<usize>, f64)> {
        let dist = self.forward(state)?;
        let action = dist.sample(rng);
        let lp = dist.log_prob(&action)?;
        Ok((action, lp))
    }

    fn greedy(&self, state: &[f64]) -> Result<Vec<usize>> {
        Ok(self.forward(state)?.greedy())
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

    fn policy() -> FactorizedPolicy {
        FactorizedPolicy::init(
            FactorizedConfig {
                cardinalities: vec![2, 3, 4],
                state_dim: 3,
                hidden: 8,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn heads_are_normalized() {
        let dist = policy().forward(&[0.1, 0.5, 0.9]).unwrap();
        for p in &dist.probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        assert_eq!(dist.cardinalities(), vec![2, 3, 4]);
    }

    #[test]
    fn joint_log_prob_is_sum_of_heads() {
        let pol = policy();
        let s = [0.2, 0.3, 0.4];
        let dist = pol.forward(&s).unwrap();
        let a = [1, 2, 0];
        let heads: f64 = (0..3).map(|i| dist.probs[i][a[i]].ln()).sum();
        assert!((pol.log_prob(&s, &a).unwrap() - heads).abs() < 1e-12);
    }

    #[test]
    fn zeroing_one_head_changes_only_that_head() {
        let pol = policy();
        let s = [0.6, 0.1, 0.0];
        let before = pol.forward(&s).unwrap();
        let mut edited = pol.clone();
        for name in ["head1.w", "head1.b"] {
            let shape = edited.params.get(name).unwrap().shape().to_vec();
            edited.params.set(name, Tensor::zeros(&shape)).unwrap();
        }
        let after = edited.forward(&s).unwrap();
        assert_eq!(before.probs[0], after.probs[0]);
        assert_eq!(before.probs[2], after.probs[2]);
        assert_ne!(before.probs[1], after.probs[1]);
        assert!(after.probs[1]
            .iter()
            .all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn count_formula_matches_store() {
        let pol = policy();
        assert_eq!(
            FactorizedConfig::count_for(&[2, 3, 4], 3, 8),
            pol.num_params()
        );
    }
}
