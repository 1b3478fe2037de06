//! Line-oriented `key = value` settings with dotted, module-scoped keys.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{CliError, Result};

/// Every recognised key with its default.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("experiment.id", "exp"),
    ("data.train_count", "40"),
    ("data.val_count", "20"),
    ("data.height", "64"),
    ("data.width", "128"),
    ("data.d_max", "24"),
    ("data.min_sprites", "3"),
    ("data.max_sprites", "6"),
    ("net.encoder_layers", "4"),
    ("net.channels", "16"),
    ("net.downsample", "2"),
    ("net.d_max", "24"),
    ("net.cost_mode", "correlation"),
    ("net.deformable_layers", ""),
    ("net.use_isa", "false"),
    ("train.epochs", "30"),
    ("train.lr", "0.15"),
    ("train.max_grad_norm", "1"),
    ("train.offset_lr_scale", "auto"),
    ("craft.epsilon", "0.05"),
    ("craft.alpha_ratio", "0.1"),
    ("craft.tile_h", "32"),
    ("craft.tile_w", "32"),
    ("craft.passes", "5"),
    ("craft.target", "pseudo_gt"),
    ("craft.init", "uniform"),
    ("attack.epsilons", "0.005,0.0125,0.025,0.05"),
    ("attack.fgsm_steps", "0"),
    ("analyze.bins", "48"),
    ("analyze.samples", "10"),
    ("finetune.epochs", "9"),
    ("finetune.lr", "0.1"),
    ("finetune.probability", "0.5"),
    ("finetune.sups", "default"),
    ("matrix.variants", "all"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn check_key(key: &str) -> Result<()> {
    if DEFAULTS.iter().any(|(k, _)| *k == key) {
        Ok(())
    } else {
        Err(CliError::UnknownKey(key.to_string()))
    }
}

impl Config {
    /// Defaults overlaid with `text`. Blank lines and `#` comments are
    /// skipped; a key may appear once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            let key = k.trim();
            check_key(key)?;
            if let Some(first) = seen.insert(key.to_string(), n + 1) {
                return Err(CliError::Config(format!(
                    "line {}: `{key}` already set on line {first}",
                    n + 1
                )));
            }
            cfg.values.insert(key.to_string(), v.trim().to_string());
        }
        Ok(cfg)
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not `key=value`")))?;
        let key = k.trim();
        check_key(key)?;
        self.values.insert(key.to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("`{key}` is not a registered config key"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse().map_err(|_| CliError::BadValue {
            key: key.to_string(),
            value: raw.to_string(),
            expected: std::any::type_name::<T>(),
        })
    }

    /// Comma-separated list; empty string gives an empty list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.raw(key);
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|_| CliError::BadValue {
                    key: key.to_string(),
                    value: raw.to_string(),
                    expected: std::any::type_name::<T>(),
                })
            })
            .collect()
    }

    /// `None` when the value is `auto` or `none`.
    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            "auto" | "none" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    pub fn bad(&self, key: &str, expected: &'static str) -> CliError {
        CliError::BadValue {
            key: key.to_string(),
            value: self.raw(key).to_string(),
            expected,
        }
    }

    /// Every key with its resolved value, in the file format.
    pub fn snapshot(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
