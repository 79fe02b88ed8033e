//! Finite-difference check of every graph operation and of the composed
//! policy losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::compute::nn::{mlp2, multi_head_attention};
use crate::compute::{grad_check, GradCheckOptions, GradReport, Graph, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::policy::{
    ArConfig, AutoregressivePolicy, ConditioningMode, FactorizedConfig, FactorizedPolicy,
    FlatConfig, FlatPolicy, Policy, SaintConfig, SaintPolicy,
};

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradReport,
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub max_rel_error: f64,
    pub coordinates_checked: usize,
}

impl SuiteReport {
    pub fn push(&mut self, name: impl Into<String>, report: GradReport) {
        self.max_rel_error = self.max_rel_error.max(report.max_rel_error);
        self.coordinates_checked += report.coordinates_checked;
        self.entries.push(SuiteEntry {
            name: name.into(),
            report,
        });
    }

    pub fn worst(&self) -> Option<&SuiteEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Reduces any output to a scalar with fixed random weights so every
/// output coordinate contributes a distinct gradient.
fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(randn(&mut rng, &shape, 1.0));
    let xw = g.mul(x, w)?;
    Ok(g.sum(xw))
}

type Builder = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    params: Vec<(&'static str, Tensor)>,
    build: Builder,
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let m34 = |rng: &mut ChaCha8Rng| randn(rng, &[3, 4], 1.0);
    let positive = |rng: &mut ChaCha8Rng| {
        let t = randn(rng, &[3, 4], 1.0);
        let data = t.data().iter().map(|v| 0.5 + v.abs()).collect();
        Tensor::new(vec![3, 4], data).unwrap()
    };
    let p = |g: &mut Graph, s: &ParamStore, n: &str| g.param(s, n);
    let mut cases: Vec<OpCase> = Vec::new();
    macro_rules! case {
        ($name:expr, [$(($pn:expr, $pv:expr)),*], |$g:ident, $s:ident| $body:expr) => {
            cases.push(OpCase {
                name: $name,
                params: vec![$(($pn, $pv)),*],
                build: Box::new(move |$g: &mut Graph, $s: &ParamStore| {
                    let out: Var = $body;
                    project($g, out, 99)
                }),
            });
        };
    }
    case!(
        "matmul",
        [("a", m34(rng)), ("b", randn(rng, &[4, 2], 1.0))],
        |g, s| {
            let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
            g.matmul(a, b)?
        }
    );
    case!(
        "matmul_nt",
        [("a", m34(rng)), ("b", randn(rng, &[5, 4], 1.0))],
        |g, s| {
            let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
            g.matmul_nt(a, b)?
        }
    );
    case!("transpose", [("a", m34(rng))], |g, s| {
        let a = p(g, s, "a")?;
        g.transpose(a)?
    });
    case!("add", [("a", m34(rng)), ("b", m34(rng))], |g, s| {
        let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
        g.add(a, b)?
    });
    case!("sub", [("a", m34(rng)), ("b", m34(rng))], |g, s| {
        let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
        g.sub(a, b)?
    });
    case!("mul", [("a", m34(rng)), ("b", m34(rng))], |g, s| {
        let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
        g.mul(a, b)?
    });
    case!(
        "add_row",
        [("a", m34(rng)), ("r", randn(rng, &[4], 1.0))],
        |g, s| {
            let (a, r) = (p(g, s, "a")?, p(g, s, "r")?);
            g.add_row(a, r)?
        }
    );
    case!(
        "mul_row",
        [("a", m34(rng)), ("r", randn(rng, &[4], 1.0))],
        |g, s| {
            let (a, r) = (p(g, s, "a")?, p(g, s, "r")?);
            g.mul_row(a, r)?
        }
    );
    case!(
        "add_n",
        [("a", m34(rng)), ("b", m34(rng)), ("c", m34(rng))],
        |g, s| {
            let xs = [p(g, s, "a")?, p(g, s, "b")?, p(g, s, "c")?];
            g.add_n(&xs)?
        }
    );
    case!("scale", [("a", m34(rng))], |g, s| {
        let a = p(g, s, "a")?;
        g.scale(a, -1.7)
    });
    case!("add_scalar", [("a", m34(rng))], |g, s| {
        let a = p(g, s, "a")?;
        let b = g.add_scalar(a, 0.3);
        g.mul(b, b)?
    });
    case!("gelu", [("a", randn(rng, &[3, 4], 2.0))], |g, s| {
        let a = p(g, s, "a")?;
        g.gelu(a)
    });
    case!("exp", [("a", m34(rng))], |g, s| {
        let a = p(g, s, "a")?;
        g.exp(a)
    });
    case!("ln", [("a", positive(rng))], |g, s| {
        let a = p(g, s, "a")?;
        g.ln(a)
    });
    case!("clamp", [("a", randn(rng, &[3, 4], 2.0))], |g, s| {
        // Bounds sit between sampled values so no coordinate is within h
        // of a kink.
        let a = p(g, s, "a")?;
        g.clamp(a, -0.937, 1.113)
    });
    case!("minimum", [("a", m34(rng)), ("b", m34(rng))], |g, s| {
        let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
        g.minimum(a, b)?
    });
    case!("softmax_rows", [("a", m34(rng))], |g, s| {
        let a = p(g, s, "a")?;
        g.softmax_rows(a)?
    });
    case!("log_softmax_rows", [("a", m34(rng))], |g, s| {
        let a = p(g, s, "a")?;
        g.log_softmax_rows(a)?
    });
    case!(
        "layer_norm",
        [
            ("a", m34(rng)),
            ("gain", randn(rng, &[4], 1.0)),
            ("bias", randn(rng, &[4], 1.0))
        ],
        |g, s| {
            let (a, gain, bias) = (p(g, s, "a")?, p(g, s, "gain")?, p(g, s, "bias")?);
            g.layer_norm(a, gain, bias, 1e-5)?
        }
    );
    case!("slice_rows", [("a", m34(rng))], |g, s| {
        let a = p(g, s, "a")?;
        g.slice_rows(a, 1, 2)?
    });
    case!("slice_cols", [("a", m34(rng))], |g, s| {
        let a = p(g, s, "a")?;
        g.slice_cols(a, 1, 2)?
    });
    case!(
        "concat_rows",
        [("a", m34(rng)), ("b", randn(rng, &[2, 4], 1.0))],
        |g, s| {
            let xs = [p(g, s, "a")?, p(g, s, "b")?];
            g.concat_rows(&xs)?
        }
    );
    case!(
        "concat_cols",
        [("a", m34(rng)), ("b", randn(rng, &[3, 2], 1.0))],
        |g, s| {
            let xs = [p(g, s, "a")?, p(g, s, "b")?];
            g.concat_cols(&xs)?
        }
    );
    case!("pick", [("a", randn(rng, &[5], 1.0))], |g, s| {
        let a = p(g, s, "a")?;
        let x = g.pick(a, 3)?;
        g.mul(x, x)?
    });
    case!("sum", [("a", m34(rng))], |g, s| {
        let a = p(g, s, "a")?;
        let x = g.sum(a);
        g.mul(x, x)?
    });
    case!("mean", [("a", m34(rng))], |g, s| {
        let a = p(g, s, "a")?;
        let x = g.mean(a);
        g.mul(x, x)?
    });
    case!(
        "linear",
        [
            ("x", m34(rng)),
            ("w", randn(rng, &[4, 3], 1.0)),
            ("b", randn(rng, &[3], 1.0))
        ],
        |g, s| {
            let (x, w, b) = (p(g, s, "x")?, p(g, s, "w")?, p(g, s, "b")?);
            g.linear(x, w, b)?
        }
    );
    case!(
        "film",
        [
            ("e", m34(rng)),
            ("gamma", randn(rng, &[4], 1.0)),
            ("beta", randn(rng, &[4], 1.0))
        ],
        |g, s| {
            let (e, gm, bt) = (p(g, s, "e")?, p(g, s, "gamma")?, p(g, s, "beta")?);
            g.film(e, gm, bt)?
        }
    );
    case!(
        "mlp2",
        [
            ("x", randn(rng, &[2, 4], 1.0)),
            ("m.l1.w", randn(rng, &[4, 6], 0.7)),
            ("m.l1.b", randn(rng, &[6], 0.3)),
            ("m.l2.w", randn(rng, &[6, 3], 0.7)),
            ("m.l2.b", randn(rng, &[3], 0.3))
        ],
        |g, s| {
            let x = p(g, s, "x")?;
            mlp2(g, s, "m", x)?
        }
    );
    case!(
        "multi_head_attention",
        [
            ("q", randn(rng, &[3, 4], 1.0)),
            ("kv", randn(rng, &[5, 4], 1.0)),
            ("att.wq", randn(rng, &[4, 4], 0.6)),
            ("att.wk", randn(rng, &[4, 4], 0.6)),
            ("att.wv", randn(rng, &[4, 4], 0.6)),
            ("att.wo", randn(rng, &[4, 4], 0.6))
        ],
        |g, s| {
            let (q, kv) = (p(g, s, "q")?, p(g, s, "kv")?);
            multi_head_attention(g, s, "att", q, kv, 2)?
        }
    );
    cases
}

fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for name in names {
        for v in store.get_mut(&name).expect("listed name").data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// `log π(a|s) + 0.1·H` for a policy rebuilt from the perturbed store.
fn policy_check<P, F>(policy: &mut P, rebuild: F, opts: &GradCheckOptions) -> Result<GradReport>
where
    P: Policy,
    F: Fn(ParamStore) -> Result<P>,
{
    let state: Vec<f64> = (0..policy.state_dim())
        .map(|i| 0.15 + 0.3 * i as f64)
        .collect();
    let action: Vec<usize> = policy
        .cardinalities()
        .iter()
        .enumerate()
        .map(|(i, &k)| (i * 2 + 1) % k)
        .collect();
    grad_check(
        |g, store| {
            let view = rebuild(store.clone())?;
            let (lp, ent) = view.evaluate(g, &state, &action)?;
            let ent = g.scale(ent, 0.1);
            g.add(lp, ent)
        },
        policy.params_mut(),
        opts,
    )
}

/// Checks a SAINT configuration under every conditioning mode, with full
/// attention and with two inducing points.
pub fn saint_suite(
    base: &SaintConfig,
    opts: &GradCheckOptions,
    report: &mut SuiteReport,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5A1);
    for mode in ConditioningMode::ALL {
        for ip in [None, Some(2)] {
            let cfg = SaintConfig {
                conditioning: mode,
                inducing_points: ip,
                ..base.clone()
            };
            let mut pol = SaintPolicy::init(cfg.clone(), rng.gen())?;
            jitter(pol.params_mut(), &mut rng, 0.2);
            let r = policy_check(&mut pol, |s| SaintPolicy::from_parts(cfg.clone(), s), opts)?;
            let attn = ip.map_or("full".to_owned(), |m| format!("isab{m}"));
            report.push(format!("saint/{mode}/{attn}"), r);
        }
    }
    Ok(())
}

/// Configuration of the composed SAINT check: A=4, K=3, d=8, L=2, H=2.
pub fn suite_saint_config() -> SaintConfig {
    let mut cfg = SaintConfig::with_width(vec![3; 4], 3, 8);
    cfg.blocks = 2;
    cfg.heads = 2;
    cfg
}

/// Every graph operation, the composed SAINT loss under all modes and
/// attention variants, and the three baseline losses.
pub fn gradient_suite(opts: &GradCheckOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = SuiteReport::default();
    for case in op_cases(&mut rng) {
        let mut store = ParamStore::new();
        for (n, t) in case.params {
            store.insert(n, t)?;
        }
        let r = grad_check(&case.build, &mut store, opts)?;
        report.push(format!("op/{}", case.name), r);
    }
    saint_suite(&suite_saint_config(), opts, &mut report)?;

    let cards = vec![3; 4];
    let fc = FactorizedConfig {
        cardinalities: cards.clone(),
        state_dim: 3,
        hidden: 6,
    };
    let mut f = FactorizedPolicy::init(fc.clone(), 1)?;
    let r = policy_check(
        &mut f,
        |s| FactorizedPolicy::from_parts(fc.clone(), s),
        opts,
    )?;
    report.push("factorized", r);
    let ac = ArConfig {
        cardinalities: cards.clone(),
        state_dim: 3,
        hidden: 6,
    };
    let mut a = AutoregressivePolicy::init(ac.clone(), 2)?;
    let r = policy_check(
        &mut a,
        |s| AutoregressivePolicy::from_parts(ac.clone(), s),
        opts,
    )?;
    report.push("ar", r);
    let flc = FlatConfig::new(cards, 3, 6);
    let mut fl = FlatPolicy::init(flc.clone(), 3)?;
    let r = policy_check(&mut fl, |s| FlatPolicy::from_parts(flc.clone(), s), opts)?;
    report.push("flat", r);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operation_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let opts = GradCheckOptions::default();
        for case in op_cases(&mut rng) {
            let mut store = ParamStore::new();
            for (n, t) in case.params {
                store.insert(n, t).unwrap();
            }
            let r = grad_check(&case.build, &mut store, &opts).unwrap();
            assert!(r.max_rel_error < 1e-6, "{}: {:?}", case.name, r.per_param);
            assert!(r.coordinates_checked > 0);
        }
    }
}
