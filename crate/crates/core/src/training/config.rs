use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adagrad,
    Adam,
    Adamw,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [
        OptimizerKind::Adagrad,
        OptimizerKind::Sgd,
        OptimizerKind::Adam,
        OptimizerKind::Adamw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Adamw => "adamw",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown optimizer `{s}` (sgd, adagrad, adam, adamw)"
                ))
            })
    }
}

/// Optimization settings for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub initial_lr: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Smallest validation-loss decrease that counts as an improvement.
    pub min_delta: f64,
    /// Decoupled decay; used by AdamW only.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Share of the training windows held out for validation.
    pub val_fraction: f64,
    /// Cap on minibatches per epoch, sampled afresh each epoch.
    pub max_batches_per_epoch: Option<usize>,
    /// Cap on training windows, drawn once with class balance preserved;
    /// every epoch then passes over the same subset.
    pub max_train_windows: Option<usize>,
    /// Cap on validation windows, drawn once with class balance preserved.
    pub max_val_windows: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adamw,
            initial_lr: 1e-4,
            lr_min: 1e-6,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            min_delta: 1e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            val_fraction: 0.1,
            max_batches_per_epoch: None,
            max_train_windows: None,
            max_val_windows: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return bad("initial_lr must be positive");
        }
        if !(self.lr_min >= 0.0) || self.lr_min > self.initial_lr {
            return bad("lr_min must lie in [0, initial_lr]");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be at least 1");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.min_delta >= 0.0) {
            return bad("eps must be positive; weight_decay and min_delta non-negative");
        }
        if self.max_batches_per_epoch == Some(0)
            || matches!(self.max_val_windows, Some(n) if n < 2)
            || matches!(self.max_train_windows, Some(n) if n < 2)
        {
            return bad("batch and window caps must allow at least one batch and two windows");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_parsing() {
        let c = TrainConfig::default();
        assert_eq!((c.initial_lr, c.batch_size, c.max_epochs), (1e-4, 64, 100));
        assert_eq!(c.optimizer, OptimizerKind::Adamw);
        let parsed = TrainConfig::from_json(r#"{"optimizer": "sgd", "initial_lr": 0.01}"#).unwrap();
        assert_eq!(parsed.optimizer, OptimizerKind::Sgd);
        assert!(TrainConfig::from_json(r#"{"initial_lr": 0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"patience": 0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"lr": 1}"#).is_err());
        assert_eq!(
            "AdamW".parse::<OptimizerKind>().unwrap(),
            OptimizerKind::Adamw
        );
    }
}
