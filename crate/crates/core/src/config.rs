//! Flat `key = value` configuration text.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. The canonical form written by [`KvMap::to_text`] lists keys in
//! sorted order as `key=value`, one per line.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: origin.into(),
                    line: n + 1,
                    msg: format!("expected key = value, got {line:?}"),
                });
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Parse { path: origin.into(), line: n + 1, msg: "empty key".into() });
            }
            entries.insert(key.to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries of `other` replace those of `self`.
    pub fn merged(mut self, other: &KvMap) -> Self {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
        self
    }

    pub fn parse_value<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| Error::Config(format!("invalid value {v:?} for {key}"))),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn update<V: FromStr>(&self, key: &str, slot: &mut V) -> Result<()> {
        if let Some(v) = self.parse_value(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Comma-separated list of unsigned integers.
    pub fn get_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        let Some(v) = self.get(key) else { return Ok(None) };
        v.split(',')
            .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("invalid list item {p:?} for {key}"))))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}
