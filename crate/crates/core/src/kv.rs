//! `key = value` text blocks with `#` comments, shared by network configs,
//! checkpoints and CLI config files.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvText {
    entries: Vec<(String, String)>,
}

impl KvText {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.iter().any(|(k, _)| k == key) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            entries.push((key.to_string(), value.trim().to_string()));
        }
        Ok(KvText { entries })
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    /// Fails on the first key not in `allowed`.
    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn parse_value<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
            })
            .transpose()
    }

    pub fn require<V: FromStr>(&self, key: &str) -> Result<V> {
        self.parse_value(key)?
            .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Parses `a,b,c` into a list.
pub fn parse_list<V: FromStr>(value: &str) -> Option<Vec<V>> {
    value.split(',').map(|s| s.trim().parse().ok()).collect()
}
