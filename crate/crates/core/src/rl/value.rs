//! State-value critic: `d_s → h → h → 1` with GELU activations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{summarize, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::compute::nn::{init_linear, linear};
use crate::compute::{backward, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ValueNet {
    state_dim: usize,
    params: ParamStore,
}

impl ValueNet {
    pub fn init(state_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if state_dim == 0 || hidden == 0 {
            return Err(Error::Config("value net widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        init_linear(&mut p, &mut rng, "value.l1", state_dim, hidden)?;
        init_linear(&mut p, &mut rng, "value.l2", hidden, hidden)?;
        init_linear(&mut p, &mut rng, "value.out", hidden, 1)?;
        Ok(Self {
            state_dim,
            params: p,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// `[N×1]` value node for a batch of states.
    pub fn graph(&self, g: &mut Graph, states: &[Vec<f64>]) -> Result<Var> {
        let mut data = Vec::with_capacity(states.len() * self.state_dim);
        for s in states {
            if s.len() != self.state_dim {
                return Err(Error::Dimension {
                    op: "value net",
                    lhs: vec![s.len()],
                    rhs: vec![self.state_dim],
                });
            }
            data.extend_from_slice(s);
        }
        let x = g.constant(Tensor::new(vec![states.len(), self.state_dim], data)?);
        let h = linear(g, &self.params, "value.l1", x)?;
        let h = g.gelu(h);
        let h = linear(g, &self.params, "value.l2", h)?;
        let h = g.gelu(h);
        linear(g, &self.params, "value.out", h)
    }

    pub fn predict(&self, states: &[Vec<f64>]) -> Result<Vec<f64>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let v = self.graph(&mut g, states)?;
        Ok(g.value(v).data().to_vec())
    }

    /// One Adam step on `coef · mean((V(s) - target)²)`. Returns the
    /// unscaled mean squared error before the step.
    pub fn regress(
        &mut self,
        states: &[Vec<f64>],
        targets: &[f64],
        coef: f64,
        lr: f64,
        max_grad_norm: f64,
    ) -> Result<f64> {
        if states.len() != targets.len() || states.is_empty() {
            return Err(Error::Contract(format!(
                "value regression on {} states and {} targets",
                states.len(),
                targets.len()
            )));
        }
        let mut g = Graph::new();
        let v = self.graph(&mut g, states)?;
        let t = g.constant(Tensor::new(vec![targets.len(), 1], targets.to_vec())?);
        let diff = g.sub(v, t)?;
        let sq = g.mul(diff, diff)?;
        let mse = g.mean(sq);
        let mse_value = g.scalar_value(mse)?;
        if !mse_value.is_finite() {
            return Err(Error::NonFinite(format!(
                "critic loss {mse_value}; values {}; targets {}",
                summarize(g.value(v).data()),
                summarize(targets)
            )));
        }
        let loss = g.scale(mse, coef);
        self.params.zero_grads();
        backward(&g, loss, &mut self.params)?;
        if max_grad_norm > 0.0 {
            self.params.clip_grad_norm(max_grad_norm);
        }
        self.params
            .adam_step(lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)?;
        Ok(mse_value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outputs_are_finite_and_batched() {
        let v = ValueNet::init(2, 8, 0).unwrap();
        let out = v
            .predict(&[vec![0.0, 1.0], vec![0.5, 0.5], vec![1.0, 0.0]])
            .unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|x| x.is_finite()));
        let single = v.predict(&[vec![0.5, 0.5]]).unwrap();
        assert!((single[0] - out[1]).abs() < 1e-14);
    }

    #[test]
    fn regression_fits_a_linear_target() {
        let mut v = ValueNet::init(1, 16, 1).unwrap();
        let states: Vec<Vec<f64>> = (0..11).map(|i| vec![i as f64 / 10.0]).collect();
        let targets: Vec<f64> = states.iter().map(|s| 3.0 * s[0] - 1.0).collect();
        let first = v.regress(&states, &targets, 1.0, 1e-2, 0.0).unwrap();
        let mut last = first;
        for _ in 0..500 {
            last = v.regress(&states, &targets, 1.0, 1e-2, 0.0).unwrap();
        }
        assert!(last < 1e-3 && last < first, "{first} -> {last}");
    }
}
