//! A single categorical over the whole joint action space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::factorized::join_list;
use super::saint::{check_same_layout, parse_usize_list};
use super::{
    argmax, categorical_terms, check_action, check_state, log_softmax, sample_categorical, softmax,
    Policy, PolicyKind, PolicyRng,
};
use crate::compute::nn::{init_linear, linear};
use crate::compute::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Largest joint space a flat policy will model.
pub const FLAT_GUARD: u128 = 1 << 20;

/// Row-major mixed-radix codec between joint-action tuples and indices:
/// the last sub-action varies fastest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedRadix {
    radices: Vec<usize>,
}

impl MixedRadix {
    pub fn new(radices: Vec<usize>) -> Self {
        Self { radices }
    }

    pub fn size(&self) -> usize {
        self.radices.iter().product()
    }

    pub fn encode(&self, tuple: &[usize]) -> Result<usize> {
        check_action(tuple, &self.radices)?;
        Ok(tuple
            .iter()
            .zip(&self.radices)
            .fold(0, |acc, (&a, &k)| acc * k + a))
    }

    pub fn decode(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.radices.len()];
        for (slot, &k) in out.iter_mut().zip(&self.radices).rev() {
            *slot = index % k;
            index /= k;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlatConfig {
    pub cardinalities: Vec<usize>,
    pub state_dim: usize,
    pub hidden: usize,
    pub guard: u128,
}

impl FlatConfig {
    pub fn new(cardinalities: Vec<usize>, state_dim: usize, hidden: usize) -> Self {
        Self {
            cardinalities,
            state_dim,
            hidden,
            guard: FLAT_GUARD,
        }
    }

    pub fn joint_size(&self) -> u128 {
        self.cardinalities.iter().map(|&k| k as u128).product()
    }

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
        let n = self.joint_size();
        if n > self.guard {
            return Err(Error::Refused(format!(
                "flat policy over {n} joint actions exceeds the guard of {}",
                self.guard
            )));
        }
        Ok(())
    }

    pub fn count_for(cardinalities: &[usize], state_dim: usize, hidden: usize) -> usize {
        let n: usize = cardinalities.iter().product();
        state_dim * hidden + hidden + hidden * hidden + hidden + hidden * n + n
    }
}

#[derive(Clone, Debug)]
pub struct FlatPolicy {
    config: FlatConfig,
    codec: MixedRadix,
    params: ParamStore,
}

impl FlatPolicy {
    pub fn init(config: FlatConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let n = config.joint_size() as usize;
        init_linear(
            &mut p,
            &mut rng,
            "trunk.l1",
            config.state_dim,
            config.hidden,
        )?;
        init_linear(&mut p, &mut rng, "trunk.l2", config.hidden, config.hidden)?;
        init_linear(&mut p, &mut rng, "joint", config.hidden, n)?;
        let codec = MixedRadix::new(config.cardinalities.clone());
        Ok(Self {
            config,
            codec,
            params: p,
        })
    }

    pub fn from_parts(config: FlatConfig, params: ParamStore) -> Result<Self> {
        let template = Self::init(config.clone(), 0)?;
        check_same_layout(&template.params, &params)?;
        Ok(Self {
            codec: template.codec,
            config,
            params,
        })
    }

    pub fn config(&self) -> &FlatConfig {
        &self.config
    }

    pub fn codec(&self) -> &MixedRadix {
        &self.codec
    }

    fn logits_graph(&self, g: &mut Graph, state: &[f64]) -> Result<Var> {
        check_state(state, self.config.state_dim)?;
        let s = g.constant(Tensor::new(vec![1, state.len()], state.to_vec())?);
        let h = linear(g, &self.params, "trunk.l1", s)?;
        let h = g.gelu(h);
        let h = linear(g, &self.params, "trunk.l2", h)?;
        let h = g.gelu(h);
        linear(g, &self.params, "joint", h)
    }

    /// Probabilities over all joint actions, indexed by the codec.
    pub fn forward(&self, state: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let l = self.logits_graph(&mut g, state)?;
        Ok(softmax(g.value(l).data()))
    }

    pub(crate) fn from_entries(get: &dyn Fn(&str) -> Result<String>) -> Result<FlatConfig> {
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|e| Error::parse(k, format!("{e}")))
        };
        let cfg = FlatConfig::new(
            parse_usize_list("cardinalities", &get("cardinalities")?)?,
            num("state_dim")?,
            num("hidden")?,
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Policy for FlatPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Flat
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
        let index = self.codec.encode(action)?;
        let logits = self.logits_graph(g, state)?;
        categorical_terms(g, logits, index)
    }

    fn sample(&self, state: &[f64], rng: &mut PolicyRng) -> Result<(Vec<usize>, f64)> {
        let mut g = Graph::new();
        let l = self.logits_graph(&mut g, state)?;
        let logits = g.value(l).data();
        let index = sample_categorical(&softmax(logits), rng);
        Ok((self.codec.decode(index), log_softmax(logits)[index]))
    }

    fn greedy(&self, state: &[f64]) -> Result<Vec<usize>> {
        let probs = self.forward(state)?;
        Ok(self.codec.decode(argmax(&probs)))
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
