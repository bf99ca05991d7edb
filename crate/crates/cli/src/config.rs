//! `key=value` defaults file and the data directory.

use std::collections::BTreeMap;
use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, Context, Result};

pub const HOME_VAR: &str = "CBDT_HOME";
pub const CONFIG_FILE: &str = "cbdt.conf";

/// Flag defaults read from a config file. Keys are long flag names without
/// the leading dashes, e.g. `learning-rate=0.01`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    home: PathBuf,
    values: BTreeMap<String, String>,
}

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected key=value", n + 1))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(anyhow!("config line {}: empty key", n + 1));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

impl Settings {
    /// Reads `explicit` if given, else `$CBDT_HOME/cbdt.conf` when present.
    pub fn load(explicit: Option<&Path>) -> Result<Self> {
        let home = env::var_os(HOME_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
        let path = match explicit {
            Some(p) => Some(p.to_path_buf()),
            None => Some(home.join(CONFIG_FILE)).filter(|p| p.is_file()),
        };
        let values = match path {
            Some(p) => {
                let text = fs::read_to_string(&p).with_context(|| format!("cannot read config {}", p.display()))?;
                parse_config(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => BTreeMap::new(),
        };
        Ok(Self { home, values })
    }

    pub fn with_values(home: PathBuf, values: BTreeMap<String, String>) -> Self {
        Self { home, values }
    }

    pub fn home(&self) -> &Path {
        &self.home
    }

    /// Flag value, else config value, else `default`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        Ok(self.pick_opt(flag, key)?.unwrap_or(default))
    }

    pub fn pick_opt<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow!("config key `{key}`: cannot parse {v:?}: {e}")),
            None => Ok(None),
        }
    }

    /// Path flag, else config value, else `name` under the data directory.
    pub fn path(&self, flag: Option<PathBuf>, key: &str, name: &str) -> Result<PathBuf> {
        Ok(self.pick_opt(flag, key)?.unwrap_or_else(|| self.home.join(name)))
    }
}
