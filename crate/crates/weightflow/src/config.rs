//! `key = value` configuration files. Command-line flags take precedence
//! over file entries, which take precedence over built-in defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("config line {}: expected key = value", n + 1)))?;
            let key = k.trim().replace('_', "-");
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::config(format!("config line {}: duplicate key {key}", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Fails on keys outside `known`.
    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::config(format!("unknown config key {k}"))),
            None => Ok(()),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.entries
            .get(key)
            .map(|v| v.parse().map_err(|_| Error::config(format!("config value for {key} is invalid: {v:?}"))))
            .transpose()
    }

    /// Flag value if given, else the file entry, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }
}
