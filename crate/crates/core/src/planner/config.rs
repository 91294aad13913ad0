//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma separated.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::engine::ExecMode;
use crate::plan::CheckpointStrategy;
use crate::profiler::{OptimizerKind, TrainingConfig};
use crate::{Error, NumericFormat, Result};

/// Parsed key/value pairs, with the line each key came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(Error::Syntax {
                    line: n + 1,
                    column: 1,
                    message: format!("expected `key = value`, found `{line}`"),
                });
            };
            let key = line[..eq].trim().to_ascii_lowercase();
            let value = line[eq + 1..].trim().to_string();
            if key.is_empty() {
                return Err(Error::Syntax {
                    line: n + 1,
                    column: 1,
                    message: "empty key".into(),
                });
            }
            if entries.insert(key.clone(), (value, n + 1)).is_some() {
                return Err(Error::Syntax {
                    line: n + 1,
                    column: 1,
                    message: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Fails on any key outside `known`.
    pub fn expect_only(&self, known: &[&str]) -> Result<()> {
        for (k, (_, line)) in &self.entries {
            if !known.contains(&k.as_str()) {
                return Err(Error::config(format!("unknown key `{k}` on line {line}")));
            }
        }
        Ok(())
    }

    fn bad(&self, key: &str, what: &str) -> Error {
        let line = self.entries.get(key).map_or(0, |e| e.1);
        Error::config(format!("line {line}: `{key}` must be {what}"))
    }

    pub fn parsed<T: FromStr>(&self, key: &str, what: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| self.bad(key, what)),
        }
    }

    pub fn or<T: FromStr>(&self, key: &str, default: T, what: &str) -> Result<T> {
        Ok(self.parsed(key, what)?.unwrap_or(default))
    }

    pub fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key).map(|v| v.to_ascii_lowercase()) {
            None => Ok(default),
            Some(v) if matches!(v.as_str(), "true" | "yes" | "1" | "on") => Ok(true),
            Some(v) if matches!(v.as_str(), "false" | "no" | "0" | "off") => Ok(false),
            Some(_) => Err(self.bad(key, "true or false")),
        }
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            })
            .unwrap_or_default()
    }
}

pub fn parse_precision(s: &str) -> Result<NumericFormat> {
    NumericFormat::parse(s).ok_or_else(|| Error::config(format!("unknown precision `{s}`")))
}

pub fn parse_exec_mode(s: &str) -> Result<ExecMode> {
    match s.trim().to_ascii_lowercase().as_str() {
        "joint" => Ok(ExecMode::Joint),
        "sequential" => Ok(ExecMode::Sequential),
        other => Err(Error::config(format!("unknown execution mode `{other}`"))),
    }
}

pub const PROFILE_KEYS: [&str; 7] = [
    "density",
    "precision",
    "minibatch",
    "microbatch",
    "strategy",
    "optimizer",
    "batchnorm_params_fp32",
];

/// Reads a `TrainingConfig` from the profile keys of `kv`.
///
/// `minibatch` is required; `microbatch` defaults to it, `precision` to fp32,
/// `optimizer` to sgd-nesterov, `strategy` to none.
pub fn training_config(kv: &KeyValues) -> Result<TrainingConfig> {
    let precision = match kv.get("precision") {
        Some(p) => parse_precision(p)?,
        None => NumericFormat::Fp32,
    };
    let minibatch: u64 = kv
        .parsed("minibatch", "a positive integer")?
        .ok_or_else(|| Error::config("missing key `minibatch`"))?;
    let optimizer = match kv.get("optimizer") {
        Some(o) => OptimizerKind::parse(o)?,
        None => OptimizerKind::SgdNesterov,
    };
    let mut cfg = TrainingConfig::baseline(precision, minibatch, optimizer);
    cfg.density = kv.or("density", 1.0, "a fraction in (0, 1]")?;
    cfg.microbatch = kv.or("microbatch", minibatch, "a positive integer")?;
    if let Some(s) = kv.get("strategy") {
        cfg.strategy = CheckpointStrategy::parse(s)?;
    }
    cfg.batchnorm_params_fp32 = kv.flag("batchnorm_params_fp32", cfg.batchnorm_params_fp32)?;
    Ok(cfg)
}

/// Key/value text that `training_config` reads back to `cfg`.
pub fn training_config_text(cfg: &TrainingConfig) -> String {
    format!(
        "density = {}\nprecision = {}\nminibatch = {}\nmicrobatch = {}\nstrategy = {}\noptimizer = {}\nbatchnorm_params_fp32 = {}\n",
        cfg.density, cfg.precision, cfg.minibatch, cfg.microbatch, cfg.strategy, cfg.optimizer, cfg.batchnorm_params_fp32
    )
}
