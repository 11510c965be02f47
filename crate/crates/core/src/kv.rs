//! `key = value` text files (config and architecture manifests).

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered `key = value` pairs. Blank lines and `#` comments are skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Format(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
        }
        Ok(KvFile { entries })
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::arg(format!("missing key {key:?}")))
    }

    /// Parses `key` if present; a malformed value is an error naming the key.
    pub fn parse_opt<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::arg(format!("{key}: cannot parse {v:?}"))),
        }
    }

    pub fn parse_or<V: FromStr>(&self, key: &str, default: V) -> Result<V> {
        Ok(self.parse_opt(key)?.unwrap_or(default))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Parses `a,b,c` into a list.
pub fn parse_list<V: FromStr>(key: &str, s: &str) -> Result<Vec<V>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::arg(format!("{key}: cannot parse list item {p:?}")))
        })
        .collect()
}
