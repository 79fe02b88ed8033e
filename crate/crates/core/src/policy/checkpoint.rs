//! Text checkpoint container.
//!
//! ```text
//! saint-checkpoint 1
//! kind=saint
//! config.d=16
//! config.cardinalities=2,2,2,2
//! ...
//! param block0.attn.wq 16x16
//! 0.0123 -0.04 ...
//! param embed 4x16
//! ...
//! ```
//!
//! One `param` header per tensor (dims joined by `x`, `-` for a scalar),
//! followed by one line of space separated row-major values. Values are
//! written in Rust's shortest round-trip notation, so loading reproduces
//! every bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{
    AutoregressivePolicy, FactorizedPolicy, FlatPolicy, Policy, PolicyKind, SaintConfig,
    SaintPolicy,
};
use crate::compute::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "saint-checkpoint 1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: PolicyKind,
    pub config: BTreeMap<String, String>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn of(policy: &dyn Policy) -> Self {
        Self {
            kind: policy.kind(),
            config: policy.config_entries().into_iter().collect(),
            params: policy.params().clone(),
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        let _ = writeln!(out, "kind={}", self.kind);
        for (k, v) in &self.config {
            let _ = writeln!(out, "config.{k}={v}");
        }
        for (name, t) in self.params.iter() {
            let dims = if t.shape().is_empty() {
                "-".to_owned()
            } else {
                t.shape()
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join("x")
            };
            let _ = writeln!(out, "param {name} {dims}");
            let values: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&values.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::parse(format!("checkpoint line {line}"), msg);
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim() == MAGIC => {}
            _ => return Err(err(1, format!("missing {MAGIC:?} header"))),
        }
        let mut kind = None;
        let mut config = BTreeMap::new();
        let mut params = ParamStore::new();
        while let Some((no, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(v) = line.strip_prefix("kind=") {
                kind = Some(v.trim().parse::<PolicyKind>()?);
            } else if let Some(rest) = line.strip_prefix("config.") {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| err(no, "config entry without '='".into()))?;
                config.insert(k.to_owned(), v.to_owned());
            } else if let Some(rest) = line.strip_prefix("param ") {
                let mut parts = rest.split_whitespace();
                let (Some(name), Some(dims), None) = (parts.next(), parts.next(), parts.next())
                else {
                    return Err(err(no, "expected `param <name> <dims>`".into()));
                };
                let shape: Vec<usize> = if dims == "-" {
                    Vec::new()
                } else {
                    dims.split('x')
                        .map(|d| d.parse().map_err(|e| err(no, format!("dim {d:?}: {e}"))))
                        .collect::<Result<_>>()?
                };
                let (vno, values) = lines
                    .next()
                    .ok_or_else(|| err(no, format!("no values for {name}")))?;
                let data: Vec<f64> = values
                    .split_whitespace()
                    .map(|v| v.parse().map_err(|e| err(vno, format!("value {v:?}: {e}"))))
                    .collect::<Result<_>>()?;
                params.insert(name, Tensor::new(shape, data)?)?;
            } else {
                return Err(err(no, format!("unrecognized line {line:?}")));
            }
        }
        let kind = kind.ok_or_else(|| err(0, "missing kind".into()))?;
        Ok(Self {
            kind,
            config,
            params,
        })
    }

    fn entry(&self, key: &str) -> Result<String> {
        self.config
            .get(key)
            .cloned()
            .ok_or_else(|| Error::parse("checkpoint", format!("missing config.{key}")))
    }

    /// Rebuilds the policy this checkpoint describes.
    pub fn into_policy(self) -> Result<Box<dyn Policy>> {
        let get = |k: &str| self.entry(k);
        Ok(match self.kind {
            PolicyKind::Saint => {
                let cfg = SaintConfig::from_entries(&get)?;
                Box::new(SaintPolicy::from_parts(cfg, self.params)?)
            }
            PolicyKind::Factorized => {
                let cfg = FactorizedPolicy::from_entries(&get)?;
                Box::new(FactorizedPolicy::from_parts(cfg, self.params)?)
            }
            PolicyKind::Autoregressive => {
                let cfg = AutoregressivePolicy::from_entries(&get)?;
                Box::new(AutoregressivePolicy::from_parts(cfg, self.params)?)
            }
            PolicyKind::Flat => {
                let cfg = FlatPolicy::from_entries(&get)?;
                Box::new(FlatPolicy::from_parts(cfg, self.params)?)
            }
        })
    }
}

pub fn save_policy(policy: &dyn Policy, path: &Path) -> Result<()> {
    fs::write(path, Checkpoint::of(policy).render()).map_err(|e| Error::io(path, e))
}

pub fn load_policy(path: &Path) -> Result<Box<dyn Policy>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::parse(&text)?.into_policy()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ArConfig, ConditioningMode, FactorizedConfig, FlatConfig};

    fn assert_bit_exact(a: &dyn Policy, b: &dyn Policy) {
        assert_eq!(a.kind(), b.kind());
        assert_eq!(a.config_entries(), b.config_entries());
        let names_a: Vec<_> = a.params().names().collect();
        let names_b: Vec<_> = b.params().names().collect();
        assert_eq!(names_a, names_b);
        for (name, t) in a.params().iter() {
            let u = b.params().get(name).unwrap();
            assert_eq!(t.shape(), u.shape());
            for (x, y) in t.data().iter().zip(u.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn every_policy_class_round_trips_bit_exact() {
        let mut saint_cfg = SaintConfig::with_width(vec![2, 3, 2], 3, 8);
        saint_cfg.conditioning = ConditioningMode::XattnInterleaved;
        saint_cfg.inducing_points = Some(2);
        let policies: Vec<Box<dyn Policy>> = vec![
            Box::new(SaintPolicy::init(saint_cfg, 1).unwrap()),
            Box::new(SaintPolicy::init(SaintConfig::with_width(vec![2, 2], 2, 8), 2).unwrap()),
            Box::new(
                FactorizedPolicy::init(
                    FactorizedConfig {
                        cardinalities: vec![2, 4],
                        state_dim: 2,
                        hidden: 5,
                    },
                    3,
                )
                .unwrap(),
            ),
            Box::new(
                AutoregressivePolicy::init(
                    ArConfig {
                        cardinalities: vec![3, 2],
                        state_dim: 2,
                        hidden: 5,
                    },
                    4,
                )
                .unwrap(),
            ),
            Box::new(FlatPolicy::init(FlatConfig::new(vec![2, 2, 3], 2, 5), 5).unwrap()),
        ];
        let dir = tempfile::tempdir().unwrap();
        for (i, p) in policies.iter().enumerate() {
            let path = dir.path().join(format!("ckpt{i}.txt"));
            save_policy(p.as_ref(), &path).unwrap();
            let loaded = load_policy(&path).unwrap();
            assert_bit_exact(p.as_ref(), loaded.as_ref());
        }
    }

    #[test]
    fn extreme_values_survive() {
        let mut store = ParamStore::new();
        store
            .insert(
                "x",
                Tensor::vector(vec![f64::MIN_POSITIVE, -1e-310, 1.0 / 3.0, f64::MAX, -0.0]),
            )
            .unwrap();
        let ck = Checkpoint {
            kind: PolicyKind::Flat,
            config: BTreeMap::new(),
            params: store,
        };
        let back = Checkpoint::parse(&ck.render()).unwrap();
        let (a, b) = (ck.params.get("x").unwrap(), back.params.get("x").unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn garbage_is_a_parse_error() {
        assert!(matches!(
            Checkpoint::parse("hello"),
            Err(Error::Parse { .. })
        ));
        let text = format!("{MAGIC}\nkind=saint\nparam w 2\n1.0 nope\n");
        assert!(matches!(Checkpoint::parse(&text), Err(Error::Parse { .. })));
    }
}
