//! Central finite-difference verification of [`backward`] gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{backward, Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Per-parameter maximum relative error between analytic and numeric
/// gradients, `|a - n| / max(1, |a|, |n|)`.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_error: f64,
    pub coordinates_checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Tensors larger than this are checked on a seeded random subset.
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords_per_param: 24,
            seed: 0,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<F>(build: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.scalar_value(loss)
}

/// Compares `backward` against central differences for every parameter in
/// `store`. The store's values are restored before returning; its gradient
/// buffers hold the analytic gradient afterwards.
pub fn grad_check<F>(
    build: F,
    store: &mut ParamStore,
    opts: &GradCheckOptions,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.h) {
        return Err(Error::Contract(format!(
            "finite-difference step {} outside [1e-7, 1e-3]",
            opts.h
        )));
    }
    let first = evaluate(&build, store)?;
    let second = evaluate(&build, store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    store.zero_grads();
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    backward(&g, loss, store)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    let mut report = GradReport::default();
    for name in names {
        let n = store.get(&name)?.len();
        let coords: Vec<usize> = if n <= opts.max_coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let analytic = store.grad(&name)?.clone();
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let original = store.get(&name)?.data()[i];
            store.get_mut(&name)?.data_mut()[i] = original + opts.h;
            let plus = evaluate(&build, store);
            store.get_mut(&name)?.data_mut()[i] = original - opts.h;
            let minus = evaluate(&build, store);
            store.get_mut(&name)?.data_mut()[i] = original;
            let numeric = (plus? - minus?) / (2.0 * opts.h);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        report.coordinates_checked += coords.len();
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_param.insert(name, worst);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::tensor::Tensor;
    use std::cell::Cell;

    #[test]
    fn linear_loss_is_exact() {
        let mut store = ParamStore::new();
        store
            .insert(
                "w",
                Tensor::new(vec![2, 2], vec![0.1, -0.4, 2.0, 3.5]).unwrap(),
            )
            .unwrap();
        let report = grad_check(
            |g, s| {
                let w = g.param(s, "w")?;
                Ok(g.sum(w))
            },
            &mut store,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
    }

    #[test]
    fn softmax_cross_entropy_matches_closed_form() {
        let logits = Tensor::new(vec![1, 3], vec![0.2, -1.3, 0.9]).unwrap();
        let mut store = ParamStore::new();
        store.insert("logits", logits.clone()).unwrap();
        let target = 2;
        let build = |g: &mut Graph, s: &ParamStore| {
            let x = g.param(s, "logits")?;
            let lp = g.log_softmax_rows(x)?;
            let picked = g.pick(lp, target)?;
            Ok(g.scale(picked, -1.0))
        };
        let report = grad_check(build, &mut store, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");

        // Analytic gradient of cross-entropy is p - onehot.
        let p = crate::compute::graph::softmax_rows(&logits).unwrap();
        let grad = store.grad("logits").unwrap();
        for i in 0..3 {
            let expected = p.data()[i] - if i == target { 1.0 } else { 0.0 };
            assert!((grad.data()[i] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn nondeterministic_builder_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        let calls = Cell::new(0.0);
        let result = grad_check(
            |g, s| {
                calls.set(calls.get() + 1.0);
                let w = g.param(s, "w")?;
                Ok(g.add_scalar(w, calls.get()))
            },
            &mut store,
            &GradCheckOptions::default(),
        );
        assert!(matches!(result, Err(Error::Determinism { .. })));
    }

    #[test]
    fn step_size_is_bounded() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        let opts = GradCheckOptions {
            h: 1e-2,
            ..Default::default()
        };
        let result = grad_check(|g, s| g.param(s, "w"), &mut store, &opts);
        assert!(matches!(result, Err(Error::Contract(_))));
    }
}
