//! `key = value` config files. Flags always win over file entries.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

const KEYS: [&str; 13] = [
    "seed", "policy", "lora_bits", "tie_eps", "def", "data", "adapters", "out", "steps", "lr", "lambda", "batch",
    "reps",
];

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
    base: PathBuf,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected key = value", path.display(), i + 1))?;
            let k = k.trim().replace('-', "_");
            if !KEYS.contains(&k.as_str()) {
                bail!("{}:{}: unknown key {k:?}", path.display(), i + 1);
            }
            values.insert(k, v.trim().to_string());
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(ConfigFile { values, base })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|_| anyhow!("config key {key}: cannot parse {v:?}")))
            .transpose()
    }

    /// Relative paths resolve against the config file's directory.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.values.get(key).map(|v| self.base.join(v))
    }

    /// `flag`, else the config entry, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(match flag {
            Some(v) => v,
            None => self.get(key)?.unwrap_or(default),
        })
    }

    pub fn pick_path(&self, flag: &Option<PathBuf>, key: &str) -> Option<PathBuf> {
        flag.clone().or_else(|| self.path(key))
    }
}
