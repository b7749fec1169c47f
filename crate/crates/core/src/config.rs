//! Flat `key = value` run configuration shared by the CLI commands.
//!
//! Every key mirrors a command-line flag; flags override file values.
//! Unknown keys are rejected and values are validated by the type that
//! consumes them.

use std::collections::BTreeMap;
use std::path::Path;

use crate::dp::{Adjacency, PrivacyParams};
use crate::dpsgd::DpSgdConfig;
use crate::error::{Error, Result};
use crate::nn::NetworkDims;

pub const KEYS: &[&str] = &[
    "dp.epsilon_step",
    "dp.delta_step",
    "dp.clip",
    "dp.noise_override",
    "dp.noisy",
    "dp.adjacency",
    "dp.budget_epsilon",
    "dp.budget_delta",
    "train.lr",
    "train.batch",
    "train.epochs",
    "fed.addr",
    "fed.workers",
    "fed.steps",
    "model.input_dim",
    "model.hidden",
    "model.classes",
    "seed",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Applies `overrides` on top of `self`.
    pub fn merged(mut self, overrides: &RunConfig) -> Self {
        for (k, v) in &overrides.values {
            self.values.insert(k.clone(), v.clone());
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|_| Error::Config(format!("bad value {v:?} for {key}"))))
            .transpose()
    }

    fn or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn seed(&self) -> Result<Option<u64>> {
        self.parsed("seed")
    }

    pub fn lr(&self) -> Result<f64> {
        self.or("train.lr", 1e-4)
    }

    pub fn batch(&self) -> Result<usize> {
        self.or("train.batch", 8)
    }

    pub fn epochs(&self) -> Result<usize> {
        self.or("train.epochs", 51)
    }

    pub fn steps(&self) -> Result<Option<u32>> {
        self.parsed("fed.steps")
    }

    pub fn workers(&self) -> Result<Option<usize>> {
        self.parsed("fed.workers")
    }

    pub fn addr(&self) -> Option<&str> {
        self.get("fed.addr")
    }

    pub fn noisy(&self) -> Result<bool> {
        self.or("dp.noisy", true)
    }

    /// Defaults: 13 x 16 x 32.
    pub fn dims(&self) -> Result<NetworkDims> {
        NetworkDims::new(self.or("model.input_dim", 13)?, self.or("model.hidden", 16)?, self.or("model.classes", 32)?)
    }

    /// Step privacy parameters (default `eps = 100`, `delta = 1e-6`).
    pub fn step_params(&self) -> Result<PrivacyParams> {
        PrivacyParams::new(self.or("dp.epsilon_step", 100.0)?, self.or("dp.delta_step", 1e-6)?)
    }

    /// Total budget, `None` when neither budget key is present.
    pub fn budget(&self) -> Result<Option<PrivacyParams>> {
        let eps: Option<f64> = self.parsed("dp.budget_epsilon")?;
        let delta: Option<f64> = self.parsed("dp.budget_delta")?;
        match (eps, delta) {
            (None, None) => Ok(None),
            (Some(e), Some(d)) => PrivacyParams::new(e, d).map(Some),
            _ => Err(Error::Config("dp.budget_epsilon and dp.budget_delta must be given together".into())),
        }
    }

    pub fn dp_config(&self) -> Result<DpSgdConfig> {
        let noisy = self.noisy()?;
        let cfg = DpSgdConfig {
            clip_bound: self.or("dp.clip", 1.0)?,
            step_params: if noisy { self.step_params()? } else { PrivacyParams::zero() },
            learning_rate: self.lr()?,
            batch_size: self.batch()?,
            adjacency: self.or("dp.adjacency", Adjacency::AddRemove)?,
            noise_override: self.parsed("dp.noise_override")?,
            noisy,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every present key with the type that consumes it.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.lr()?;
        self.batch()?;
        self.epochs()?;
        self.steps()?;
        self.workers()?;
        self.dims()?;
        self.budget()?;
        self.dp_config()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Federated steps covering `epochs` passes over `n_sequences` at `batch`:
/// `epochs * ceil(n_sequences / batch)`.
pub fn epochs_to_steps(epochs: usize, n_sequences: usize, batch: usize) -> usize {
    epochs * n_sequences.div_ceil(batch.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_hyperparameters_verbatim() {
        let cfg = RunConfig::parse(
            "dp.epsilon_step = 100\ndp.delta_step = 1e-6\ntrain.lr = 1e-4\ndp.clip = 1\ndp.noise_override = 0.098\nseed = 7\n",
        )
        .unwrap();
        let dp = cfg.dp_config().unwrap();
        assert_eq!(dp.step_params, PrivacyParams { epsilon: 100.0, delta: 1e-6 });
        assert_eq!(dp.learning_rate, 1e-4);
        assert_eq!(dp.clip_bound, 1.0);
        assert_eq!(dp.noise_sd(8).unwrap(), 0.098);
        assert_eq!(cfg.seed().unwrap(), Some(7));
    }

    #[test]
    fn unknown_and_invalid_keys() {
        assert!(RunConfig::parse("dp.epsilon = 1").is_err());
        assert!(RunConfig::parse("dp.clip = -1").is_err());
        assert!(RunConfig::parse("train.batch = 0").is_err());
        assert!(RunConfig::parse("dp.budget_epsilon = 5").is_err());
        assert!(RunConfig::parse("just words").is_err());
    }

    #[test]
    fn flags_override_file() {
        let file = RunConfig::parse("train.lr = 0.1\nseed = 1").unwrap();
        let mut flags = RunConfig::default();
        flags.set("train.lr", "0.5").unwrap();
        let merged = file.merged(&flags);
        assert_eq!(merged.lr().unwrap(), 0.5);
        assert_eq!(merged.seed().unwrap(), Some(1));
        assert_eq!(RunConfig::parse(&merged.to_text()).unwrap(), merged);
    }

    #[test]
    fn non_noisy_worker_spends_nothing() {
        let cfg = RunConfig::parse("dp.noisy = false").unwrap();
        let dp = cfg.dp_config().unwrap();
        assert!(!dp.noisy);
        assert!(dp.step_params.is_zero());
    }

    #[test]
    fn steps_from_epochs() {
        assert_eq!(epochs_to_steps(14, 100, 8), 14 * 13);
        assert_eq!(epochs_to_steps(0, 100, 8), 0);
    }
}
