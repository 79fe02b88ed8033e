//! Flat `key = value` configuration files.
//!
//! ```text
//! # CoNE, 7 axes, a quarter of the interior are pits
//! env.D = 7
//! env.M = 5
//! env.pit_fraction = 0.25
//! policy.class = saint
//! train.max_episodes = 3000
//! run.seeds = 0,1,2,3,4
//! ```
//!
//! One entry per line, keys are dotted paths, `#` starts a comment line,
//! surrounding whitespace is ignored. A key may appear once. Keys are
//! documented on [`ExperimentSpec`](super::ExperimentSpec).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed entries plus the line each came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::parse(
                    format!("config line {line_no}"),
                    format!("expected `key = value`, got {line:?}"),
                )
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::parse(format!("config line {line_no}"), "empty key"));
            }
            if let Some((_, first)) = entries.insert(k.to_owned(), (v.to_owned(), line_no)) {
                return Err(Error::parse(
                    format!("config line {line_no}"),
                    format!("{k} already set on line {first}"),
                ));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override, replacing any existing entry.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| {
            Error::parse(
                "override",
                format!("expected key=value, got {assignment:?}"),
            )
        })?;
        self.entries
            .insert(k.trim().to_owned(), (v.trim().to_owned(), 0));
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            Some(v) => self.convert(key, v),
            None => Err(Error::Config(format!("missing required field {key}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            Some(v) => self.convert(key, v),
            None => Ok(default),
        }
    }

    /// `none` (or absence) maps to `None`.
    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None | Some("none") => Ok(None),
            Some(v) => self.convert(key, v).map(Some),
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|t| self.convert(key, t.trim()))
                    .collect::<Result<Vec<T>>>()
            })
            .transpose()
    }

    fn convert<T: FromStr>(&self, key: &str, v: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let line = self.entries.get(key).map_or(0, |(_, l)| *l);
        let ctx = if line > 0 {
            format!("config line {line} ({key})")
        } else {
            key.to_owned()
        };
        v.parse()
            .map_err(|e: T::Err| Error::parse(ctx, format!("{v:?}: {e}")))
    }
}

/// Renders entries in the given order, one `key = value` per line.
pub fn render(entries: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}
