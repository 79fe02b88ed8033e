//! Layers built from graph operations: linear maps, MLPs, layer norm and
//! multi-head attention. Parameters live in a [`ParamStore`] under a caller
//! supplied prefix.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{uniform_fan_in, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.insert(format!("{prefix}.w"), uniform_fan_in(rng, fan_in, fan_out))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))
}

pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    g.linear(x, w, b)
}

/// Two linear layers with a GELU between them.
pub fn init_mlp2<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    dims: (usize, usize, usize),
) -> Result<()> {
    init_linear(store, rng, &format!("{prefix}.l1"), dims.0, dims.1)?;
    init_linear(store, rng, &format!("{prefix}.l2"), dims.1, dims.2)
}

pub fn mlp2(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, store, &format!("{prefix}.l1"), x)?;
    let h = g.gelu(h);
    linear(g, store, &format!("{prefix}.l2"), h)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.gain"), Tensor::full(&[d], 1.0))?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]))
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param(store, &format!("{prefix}.gain"))?;
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Projection matrices `wq`, `wk`, `wv`, `wo`, each `d×d`, no biases.
pub fn init_attention<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    d: usize,
) -> Result<()> {
    for name in ["wq", "wk", "wv", "wo"] {
        store.insert(format!("{prefix}.{name}"), uniform_fan_in(rng, d, d))?;
    }
    Ok(())
}

/// Multi-head scaled dot-product attention.
///
/// Queries come from `q_in` (`[n_q×d]`), keys and values from `kv_in`
/// (`[n_k×d]`). Each head attends over a `d/heads` slice with scale
/// `1/√(d/heads)`; head outputs are concatenated and projected by `wo`.
/// Self-attention is the call with `q_in == kv_in`.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
) -> Result<Var> {
    let d = g.value(q_in).cols();
    if g.value(kv_in).cols() != d {
        return Err(Error::Dimension {
            op: "multi_head_attention",
            lhs: g.value(q_in).shape().to_vec(),
            rhs: g.value(kv_in).shape().to_vec(),
        });
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "width {d} is not divisible into {heads} heads"
        )));
    }
    let wq = g.param(store, &format!("{prefix}.wq"))?;
    let wk = g.param(store, &format!("{prefix}.wk"))?;
    let wv = g.param(store, &format!("{prefix}.wv"))?;
    let wo = g.param(store, &format!("{prefix}.wo"))?;
    let q = g.matmul(q_in, wq)?;
    let k = g.matmul(kv_in, wk)?;
    let v = g.matmul(kv_in, wv)?;

    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax_rows(scores)?;
        outs.push(g.matmul(weights, vh)?);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    g.matmul(cat, wo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::graph::softmax_rows;
    use crate::compute::params::normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn attn_store(d: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_attention(&mut store, &mut rng, "att", d).unwrap();
        store
    }

    #[test]
    fn single_key_attention_ignores_queries() {
        let store = attn_store(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let kv = g.constant(normal(&mut rng, &[1, 4], 1.0));
        let expected = store
            .get("att.wv")
            .and_then(|wv| g.value(kv).matmul(wv))
            .and_then(|v| v.matmul(store.get("att.wo").unwrap()))
            .unwrap();
        for _ in 0..3 {
            let q = g.constant(normal(&mut rng, &[3, 4], 1.0));
            let out = multi_head_attention(&mut g, &store, "att", q, kv, 2).unwrap();
            for r in 0..3 {
                for c in 0..4 {
                    assert!((g.value(out).at(r, c) - expected.at(0, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let store = attn_store(4, 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            multi_head_attention(&mut g, &store, "att", x, x, 3),
            Err(Error::Config(_))
        ));
    }

    /// Step-by-step reference with explicit loops over tokens and heads.
    fn reference_mha(x: &Tensor, store: &ParamStore, heads: usize) -> Tensor {
        let (n, d) = x.dims2().unwrap();
        let dh = d / heads;
        let proj = |w: &Tensor| {
            let mut out = vec![vec![0.0; d]; n];
            for i in 0..n {
                for j in 0..d {
                    for p in 0..d {
                        out[i][j] += x.at(i, p) * w.at(p, j);
                    }
                }
            }
            out
        };
        let q = proj(store.get("att.wq").unwrap());
        let k = proj(store.get("att.wk").unwrap());
        let v = proj(store.get("att.wv").unwrap());
        let mut cat = vec![vec![0.0; d]; n];
        for h in 0..heads {
            for i in 0..n {
                let mut scores = Vec::new();
                for j in 0..n {
                    let mut s = 0.0;
                    for c in h * dh..(h + 1) * dh {
                        s += q[i][c] * k[j][c];
                    }
                    scores.push(s / (dh as f64).sqrt());
                }
                let m = scores.iter().copied().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..n {
                    let w = (scores[j] - m).exp() / z;
                    for c in h * dh..(h + 1) * dh {
                        cat[i][c] += w * v[j][c];
                    }
                }
            }
        }
        let wo = store.get("att.wo").unwrap();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                for p in 0..d {
                    out[i * d + j] += cat[i][p] * wo.at(p, j);
                }
            }
        }
        Tensor::new(vec![n, d], out).unwrap()
    }

    #[test]
    fn two_tokens_two_heads_match_reference() {
        let store = attn_store(4, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xt = normal(&mut rng, &[2, 4], 1.0);
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let out = multi_head_attention(&mut g, &store, "att", x, x, 2).unwrap();
        let expected = reference_mha(&xt, &store, 2);
        assert!(g.value(out).max_abs_diff(&expected) < 1e-10);
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let store = attn_store(8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xt = normal(&mut rng, &[5, 8], 1.0);
        let perm = [3, 0, 4, 1, 2];
        let permuted =
            Tensor::from_rows(&perm.iter().map(|&p| xt.row(p).to_vec()).collect::<Vec<_>>())
                .unwrap();
        let mut g = Graph::new();
        let x = g.constant(xt);
        let px = g.constant(permuted);
        let out = multi_head_attention(&mut g, &store, "att", x, x, 2).unwrap();
        let pout = multi_head_attention(&mut g, &store, "att", px, px, 2).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((g.value(pout).at(i, c) - g.value(out).at(p, c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn softmax_matches_extended_precision_reference() {
        // exp(1), exp(2), exp(3) normalized; reference values computed with
        // 50-digit arithmetic.
        let expected = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_64,
            0.665_240_955_774_821_9,
        ];
        let s = softmax_rows(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap()).unwrap();
        for (got, want) in s.data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}
