//! Set-based sub-action attention policy.
//!
//! Pipeline for one state:
//!
//! 1. a learned embedding row per sub-action (`embed`, `[A×d]`);
//! 2. state conditioning, by default FiLM (`γ ⊙ e_i + β` with
//!    `(γ-1, β) = g(s)`), or one of the cross-attention / state-token
//!    variants;
//! 3. `L` pre-norm Transformer blocks with no positional information, so the
//!    stack is equivariant to permutations of the sub-actions. Blocks can
//!    use inducing-point attention (two cross-attention passes through a
//!    learned summary set) in place of full self-attention;
//! 4. a final layer norm and one decision MLP per sub-action producing
//!    `K_i` logits, decoded in parallel.
//!
//! Parameter names (all under one [`ParamStore`]):
//!
//! ```text
//! embed                         [A×d]
//! film.l1.{w,b} film.l2.{w,b}   d_s → film_hidden → 2d      (film mode)
//! state_proj.{w,b}              d_s → d                     (other modes)
//! xattn_pre.{ln,attn}.*         (xattn_pre)
//! xattn_post.{ln,attn}.*        (xattn_post)
//! block{l}.ln1.*  block{l}.attn.{wq,wk,wv,wo}
//! block{l}.isab.points [m×d]  block{l}.isab.{attn_in,attn_out}.*   (inducing points)
//! block{l}.xattn.{ln,attn}.*    (xattn_interleaved)
//! block{l}.ln2.*  block{l}.ffn.{l1,l2}.*        d → 4d → d
//! final_ln.*
//! head{i}.l1.{w,b} head{i}.l2.{w,b}             d → head_hidden → K_i
//! ```

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    check_action, check_state, product_form_terms, Policy, PolicyDistribution, PolicyKind,
    PolicyRng,
};
use crate::compute::nn::{
    init_attention, init_layer_norm, init_linear, init_mlp2, layer_norm, linear, mlp2,
    multi_head_attention,
};
use crate::compute::params::normal;
use crate::compute::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

const EMBED_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConditioningMode {
    Film,
    XattnPre,
    XattnPost,
    XattnInterleaved,
    StateToken,
}

impl ConditioningMode {
    pub const ALL: [ConditioningMode; 5] = [
        ConditioningMode::Film,
        ConditioningMode::XattnPre,
        ConditioningMode::XattnPost,
        ConditioningMode::XattnInterleaved,
        ConditioningMode::StateToken,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditioningMode::Film => "film",
            ConditioningMode::XattnPre => "xattn_pre",
            ConditioningMode::XattnPost => "xattn_post",
            ConditioningMode::XattnInterleaved => "xattn_interleaved",
            ConditioningMode::StateToken => "state_token",
        }
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown conditioning mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaintConfig {
    pub cardinalities: Vec<usize>,
    pub d: usize,
    pub state_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub conditioning: ConditioningMode,
    /// Inducing-point count; `None` means full self-attention.
    pub inducing_points: Option<usize>,
    pub film_hidden: usize,
    pub head_hidden: usize,
}

impl SaintConfig {
    pub const DEFAULT_D: usize = 16;

    /// Defaults: `d = 16`, 3 blocks × 1 head, FiLM conditioning with a
    /// `2d`-wide generator and `d`-wide decision heads.
    pub fn new(cardinalities: Vec<usize>, state_dim: usize) -> Self {
        Self::with_width(cardinalities, state_dim, Self::DEFAULT_D)
    }

    pub fn with_width(cardinalities: Vec<usize>, state_dim: usize, d: usize) -> Self {
        Self {
            cardinalities,
            d,
            state_dim,
            blocks: 3,
            heads: 1,
            conditioning: ConditioningMode::Film,
            inducing_points: None,
            film_hidden: 2 * d,
            head_hidden: d,
        }
    }

    pub fn num_sub_actions(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cardinalities.is_empty() {
            return Err(Error::Config("need at least one sub-action".into()));
        }
        if let Some(i) = self.cardinalities.iter().position(|&k| k < 2) {
            return Err(Error::Config(format!(
                "sub-action {i} has {} choices; need at least 2",
                self.cardinalities[i]
            )));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible into {} heads",
                self.d, self.heads
            )));
        }
        if self.state_dim == 0 {
            return Err(Error::Config("state width must be positive".into()));
        }
        if self.inducing_points == Some(0) {
            return Err(Error::Config("inducing point count must be >= 1".into()));
        }
        if self.film_hidden == 0 || self.head_hidden == 0 {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        let cards = self
            .cardinalities
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("cardinalities".into(), cards),
            ("d".into(), self.d.to_string()),
            ("state_dim".into(), self.state_dim.to_string()),
            ("blocks".into(), self.blocks.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("conditioning".into(), self.conditioning.to_string()),
            (
                "inducing_points".into(),
                self.inducing_points
                    .map_or("none".into(), |m| m.to_string()),
            ),
            ("film_hidden".into(), self.film_hidden.to_string()),
            ("head_hidden".into(), self.head_hidden.to_string()),
        ]
    }

    pub(crate) fn from_entries(get: &dyn Fn(&str) -> Result<String>) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|e| Error::parse(k, format!("{e}")))
        };
        let cardinalities = parse_usize_list("cardinalities", &get("cardinalities")?)?;
        let ip = get("inducing_points")?;
        let cfg = Self {
            cardinalities,
            d: num("d")?,
            state_dim: num("state_dim")?,
            blocks: num("blocks")?,
            heads: num("heads")?,
            conditioning: get("conditioning")?.parse()?,
            inducing_points: if ip == "none" {
                None
            } else {
                Some(
                    ip.parse()
                        .map_err(|e| Error::parse("inducing_points", format!("{e}")))?,
                )
            },
            film_hidden: num("film_hidden")?,
            head_hidden: num("head_hidden")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|e| Error::parse(key, format!("{t:?}: {e}")))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SaintPolicy {
    config: SaintConfig,
    params: ParamStore,
}

/// Conditioned sub-action tokens plus the projected state token used by the
/// cross-attention modes.
#[derive(Clone, Copy, Debug)]
pub struct Conditioned {
    pub tokens: Var,
    pub state_token: Option<Var>,
}

impl SaintPolicy {
    /// Deterministic initialization from `seed`.
    ///
    /// Linear layers draw fan-in scaled uniform weights with zero biases and
    /// embeddings draw `N(0, 0.02²)`. The FiLM generator's output layer
    /// starts at zero so that `γ = 1, β = 0` for every state at step 0.
    pub fn init(config: SaintConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (a, d) = (config.num_sub_actions(), config.d);

        p.insert("embed", normal(&mut rng, &[a, d], EMBED_STD))?;
        match config.conditioning {
            ConditioningMode::Film => {
                init_mlp2(
                    &mut p,
                    &mut rng,
                    "film",
                    (config.state_dim, config.film_hidden, 2 * d),
                )?;
                p.set("film.l2.w", Tensor::zeros(&[config.film_hidden, 2 * d]))?;
            }
            mode => {
                init_linear(&mut p, &mut rng, "state_proj", config.state_dim, d)?;
                let outer = match mode {
                    ConditioningMode::XattnPre => Some("xattn_pre"),
                    ConditioningMode::XattnPost => Some("xattn_post"),
                    _ => None,
                };
                if let Some(prefix) = outer {
                    init_layer_norm(&mut p, &format!("{prefix}.ln"), d)?;
                    init_attention(&mut p, &mut rng, &format!("{prefix}.attn"), d)?;
                }
            }
        }
        for l in 0..config.blocks {
            let b = format!("block{l}");
            init_layer_norm(&mut p, &format!("{b}.ln1"), d)?;
            match config.inducing_points {
                None => init_attention(&mut p, &mut rng, &format!("{b}.attn"), d)?,
                Some(m) => {
                    p.insert(
                        format!("{b}.isab.points"),
                        normal(&mut rng, &[m, d], 1.0 / (d as f64).sqrt()),
                    )?;
                    init_attention(&mut p, &mut rng, &format!("{b}.isab.attn_in"), d)?;
                    init_attention(&mut p, &mut rng, &format!("{b}.isab.attn_out"), d)?;
                }
            }
            if config.conditioning == ConditioningMode::XattnInterleaved {
                init_layer_norm(&mut p, &format!("{b}.xattn.ln"), d)?;
                init_attention(&mut p, &mut rng, &format!("{b}.xattn.attn"), d)?;
            }
            init_layer_norm(&mut p, &format!("{b}.ln2"), d)?;
            init_mlp2(&mut p, &mut rng, &format!("{b}.ffn"), (d, 4 * d, d))?;
        }
        init_layer_norm(&mut p, "final_ln", d)?;
        for (i, &k) in config.cardinalities.iter().enumerate() {
            init_mlp2(
                &mut p,
                &mut rng,
                &head_prefix(i),
                (d, config.head_hidden, k),
            )?;
        }
        Ok(Self { config, params: p })
    }

    /// Wraps existing parameters, checking that every expected name exists
    /// with the right shape.
    pub fn from_parts(config: SaintConfig, params: ParamStore) -> Result<Self> {
        let template = Self::init(config.clone(), 0)?;
        check_same_layout(&template.params, &params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &SaintConfig {
        &self.config
    }

    /// Embeddings after state conditioning: `[A×d]`, or `[(A+1)×d]` in
    /// state-token mode with the state in the last row.
    pub fn state_condition(&self, g: &mut Graph, state: &[f64]) -> Result<Conditioned> {
        check_state(state, self.config.state_dim)?;
        let p = &self.params;
        let d = self.config.d;
        let embed = g.param(p, "embed")?;
        let s = g.constant(Tensor::new(vec![1, state.len()], state.to_vec())?);
        match self.config.conditioning {
            ConditioningMode::Film => {
                let film = mlp2(g, p, "film", s)?;
                let gamma_offset = g.slice_cols(film, 0, d)?;
                let gamma = g.add_scalar(gamma_offset, 1.0);
                let beta = g.slice_cols(film, d, d)?;
                Ok(Conditioned {
                    tokens: g.film(embed, gamma, beta)?,
                    state_token: None,
                })
            }
            ConditioningMode::StateToken => {
                let tok = linear(g, p, "state_proj", s)?;
                Ok(Conditioned {
                    tokens: g.concat_rows(&[embed, tok])?,
                    state_token: None,
                })
            }
            _ => {
                let tok = linear(g, p, "state_proj", s)?;
                Ok(Conditioned {
                    tokens: embed,
                    state_token: Some(tok),
                })
            }
        }
    }

    fn cross_attend(
        &self,
        g: &mut Graph,
        prefix: &str,
        x: Var,
        state_token: Option<Var>,
    ) -> Result<Var> {
        let tok = state_token
            .ok_or_else(|| Error::Contract("cross-attention needs a state token".into()))?;
        let xn = layer_norm(g, &self.params, &format!("{prefix}.ln"), x)?;
        let att = multi_head_attention(
            g,
            &self.params,
            &format!("{prefix}.attn"),
            xn,
            tok,
            self.config.heads,
        )?;
        g.add(x, att)
    }

    /// The interaction stack over conditioned tokens.
    pub fn interaction_forward(&self, g: &mut Graph, cond: Conditioned) -> Result<Var> {
        let p = &self.params;
        let heads = self.config.heads;
        let mut x = cond.tokens;
        let width = g.value(x).cols();
        if width != self.config.d {
            return Err(Error::Dimension {
                op: "interaction_forward",
                lhs: g.value(x).shape().to_vec(),
                rhs: vec![self.config.d],
            });
        }
        if self.config.conditioning == ConditioningMode::XattnPre {
            x = self.cross_attend(g, "xattn_pre", x, cond.state_token)?;
        }
        for l in 0..self.config.blocks {
            let b = format!("block{l}");
            let xn = layer_norm(g, p, &format!("{b}.ln1"), x)?;
            let mixed = match self.config.inducing_points {
                None => multi_head_attention(g, p, &format!("{b}.attn"), xn, xn, heads)?,
                Some(_) => {
                    let points = g.param(p, &format!("{b}.isab.points"))?;
                    let gathered = multi_head_attention(
                        g,
                        p,
                        &format!("{b}.isab.attn_in"),
                        points,
                        xn,
                        heads,
                    )?;
                    let summaries = g.add(points, gathered)?;
                    multi_head_attention(g, p, &format!("{b}.isab.attn_out"), xn, summaries, heads)?
                }
            };
            x = g.add(x, mixed)?;
            if self.config.conditioning == ConditioningMode::XattnInterleaved {
                x = self.cross_attend(g, &format!("{b}.xattn"), x, cond.state_token)?;
            }
            let xn = layer_norm(g, p, &format!("{b}.ln2"), x)?;
            let ff = mlp2(g, p, &format!("{b}.ffn"), xn)?;
            x = g.add(x, ff)?;
        }
        if self.config.conditioning == ConditioningMode::XattnPost {
            x = self.cross_attend(g, "xattn_post", x, cond.state_token)?;
        }
        Ok(x)
    }

    /// Per-sub-action logits from the interaction output. Any extra rows
    /// beyond the first `A` (the state token) are ignored.
    pub fn decode(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let a = self.config.num_sub_actions();
        let rows = if g.value(x).rows() == a {
            x
        } else {
            g.slice_rows(x, 0, a)?
        };
        let xn = layer_norm(g, &self.params, "final_ln", rows)?;
        (0..a)
            .map(|i| {
                let row = g.slice_rows(xn, i, 1)?;
                mlp2(g, &self.params, &head_prefix(i), row)
            })
            .collect()
    }

    pub fn logits_graph(&self, g: &mut Graph, state: &[f64]) -> Result<Vec<Var>> {
        let cond = self.state_condition(g, state)?;
        let x = self.interaction_forward(g, cond)?;
        self.decode(g, x)
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

    /// Conditioned tokens as plain values.
    pub fn state_condition_values(&self, state: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let c = self.state_condition(&mut g, state)?;
        Ok(g.value(c.tokens).clone())
    }

    /// Runs the interaction stack on explicit tokens. Cross-attention
    /// modes take their state token from `state`.
    pub fn interaction_values(&self, tokens: &Tensor, state: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let cond = self.state_condition(&mut g, state)?;
        let tokens = g.constant(tokens.clone());
        let x = self.interaction_forward(
            &mut g,
            Conditioned {
                tokens,
                state_token: cond.state_token,
            },
        )?;
        Ok(g.value(x).clone())
    }

    /// The same policy with sub-action identities relabeled: new sub-action
    /// `j` is old sub-action `perm[j]` (embedding row, head and cardinality
    /// move together).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let a = self.config.num_sub_actions();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..a).collect::<Vec<_>>() {
            return Err(Error::Contract(format!(
                "{perm:?} is not a permutation of 0..{a}"
            )));
        }
        let mut config = self.config.clone();
        config.cardinalities = perm.iter().map(|&i| self.config.cardinalities[i]).collect();
        let mut params = ParamStore::new();
        for (name, value) in self.params.iter() {
            if name == "embed" {
                let rows: Vec<Vec<f64>> = perm.iter().map(|&i| value.row(i).to_vec()).collect();
                params.insert(name, Tensor::from_rows(&rows)?)?;
            } else if !name.starts_with("head") {
                params.insert(name, value.clone())?;
            }
        }
        for (j, &i) in perm.iter().enumerate() {
            let (from, to) = (head_prefix(i), head_prefix(j));
            for suffix in ["l1.w", "l1.b", "l2.w", "l2.b"] {
                params.insert(
                    format!("{to}.{suffix}"),
                    self.params.get(&format!("{from}.{suffix}"))?.clone(),
                )?;
            }
        }
        Ok(Self { config, params })
    }
}

fn head_prefix(i: usize) -> String {
    format!("head{i}")
}

pub(crate) fn check_same_layout(expected: &ParamStore, got: &ParamStore) -> Result<()> {
    for (name, t) in expected.iter() {
        let have = got
            .get(name)
            .map_err(|_| Error::Contract(format!("missing parameter {name}")))?;
        if have.shape() != t.shape() {
            return Err(Error::Dimension {
                op: "parameter layout",
                lhs: t.shape().to_vec(),
                rhs: have.shape().to_vec(),
            });
        }
    }
    if let Some(extra) = got.names().find(|n| !expected.contains(n)) {
        return Err(Error::Contract(format!("unexpected parameter {extra}")));
    }
    Ok(())
}

impl Policy for SaintPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Saint
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
        self.config.entries()
    }
}
