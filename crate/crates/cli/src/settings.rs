//! Flat `key = value` settings files. Command-line flags override file
//! values, which override built-in defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

const KNOWN: &[&str] = &[
    "docs",
    "codes",
    "seed",
    "vocab",
    "top_k",
    "pairs",
    "pair_prob",
    "or_threshold",
    "min_support",
    "epochs",
    "pretrain_epochs",
    "batch_size",
    "lr",
    "max_len",
    "lambda",
    "clip_norm",
    "dims",
    "candidate",
    "no_copy",
    "no_arl",
    "split",
];

#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::config(format!("config line {}: expected key = value", i + 1)));
            };
            let key = k.trim().replace('-', "_");
            if !KNOWN.contains(&key.as_str()) {
                return Err(CliError::config(format!("config line {}: unknown key `{key}`", i + 1)));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Settings { values })
    }

    /// `flag`, else the file value for `key`, if any.
    pub fn maybe<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError> {
        if flag.is_some() {
            return Ok(flag);
        }
        self.values
            .get(key)
            .map(|raw| {
                raw.parse()
                    .map_err(|_| CliError::config(format!("config key `{key}`: cannot parse `{raw}`")))
            })
            .transpose()
    }

    /// `flag`, else the file value for `key`, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.maybe(flag, key)?.unwrap_or(default))
    }

    /// Boolean switches: set by the flag or by `key = true` in the file.
    pub fn switch(&self, flag: bool, key: &str) -> Result<bool, CliError> {
        if flag {
            return Ok(true);
        }
        self.pick(None, key, false)
    }
}
