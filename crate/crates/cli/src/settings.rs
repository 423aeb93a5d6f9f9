//! Flat `key=value` run configuration. Flags are applied on top of the file,
//! and every value a command actually reads goes into its config hash.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use riskrank::error::{Error, Result};
use sha2::{Digest, Sha256};

pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    // synth
    "n_traders",
    "trades_per_trader",
    "risky_profile_rate",
    "link_strength",
    "edge_per_skill",
    "risky_skill_bonus",
    "trade_noise",
    "alpha",
    // split
    "train_frac",
    "valid_frac",
    "test_frac",
    "minority_ratio",
    // group
    "group_size",
    "test_group_size",
    "exhaustive_test_groups",
    // model
    "d_k",
    "n_heads",
    "ff_width",
    "n_self_layers",
    "n_cross_layers",
    "dropout",
    // train
    "pretrain_epochs",
    "pretrain_patience",
    "pretrain_batch",
    "epochs",
    "learning_rate",
    "batch_groups",
    "loss",
    "topk",
    "positive_weight",
    "clip_norm",
    // eval
    "prior",
    "regime",
    // two-step
    "l2",
    "lr_iterations",
    "lr_balanced",
    // gradcheck
    "trials",
];

#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    used: RefCell<BTreeMap<String, String>>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key=value, got {line:?}", i + 1)))?;
            s.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(s)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Settings::default()),
            Some(p) => Settings::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn set_opt<T: Display>(&mut self, key: &str, value: Option<T>) -> Result<()> {
        match value {
            Some(v) => self.set(key, v.to_string()),
            None => Ok(()),
        }
    }

    /// Applies `KEY=VALUE` overrides given on the command line.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {p:?}")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn get<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        debug_assert!(KNOWN_KEYS.contains(&key), "{key}");
        let v = match self.values.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map_err(|e| Error::Config(format!("bad value {raw:?} for {key}: {e}")))?,
            None => default,
        };
        self.used.borrow_mut().insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed", 0u64)
    }

    /// SHA-256 over the resolved values read so far, as `key=value` lines.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.used.borrow().iter() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
