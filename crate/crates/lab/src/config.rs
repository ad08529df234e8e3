//! Flat key-value configuration files with dotted keys, CLI `--set`
//! overrides, and run manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{contract_err, usage_err, Error, Result};

/// Ordered key-value map read from a config file plus overrides.
#[derive(Debug, Clone, Default)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn empty() -> Self {
        Config::default()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Config::empty();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(contract_err!(
                    "{}:{}: expected key=value, got {:?}",
                    path.display(),
                    lineno + 1,
                    raw
                ));
            };
            cfg.map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.map.insert(key.to_string(), value.to_string());
    }

    /// Applies `--set key=value` pairs.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for pair in pairs {
            let Some((key, value)) = pair.split_once('=') else {
                return Err(usage_err!("--set expects key=value, got {:?}", pair));
            };
            self.set(key.trim(), value.trim());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.map.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| contract_err!("config key {} has unparsable value {:?}", key, raw)),
        }
    }

    /// Comma- or x-separated list of integers (e.g. backbone widths).
    pub fn parse_list_or(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.map.get(key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(|c| c == ',' || c == 'x')
                .map(|tok| {
                    tok.trim()
                        .parse()
                        .map_err(|_| contract_err!("config key {} has unparsable list {:?}", key, raw))
                })
                .collect(),
        }
    }

    /// Rejects keys outside the allowed set.
    pub fn ensure_known_keys(&self, allowed: &[&str]) -> Result<()> {
        for key in self.map.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(contract_err!("unknown config key {:?}", key));
            }
        }
        Ok(())
    }
}

/// Deterministic manifest of a resolved run: command plus sorted key=value
/// lines. Every command writes (or prints) one of these.
pub fn manifest(command: &str, entries: &[(String, String)]) -> String {
    let mut sorted: Vec<&(String, String)> = entries.iter().collect();
    sorted.sort();
    let mut out = String::new();
    let _ = writeln!(out, "command = {command}");
    for (k, v) in sorted {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

pub fn write_manifest(dir: &Path, command: &str, entries: &[(String, String)]) -> Result<()> {
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest(command, entries)).map_err(|e| Error::io(&path, e))
}
