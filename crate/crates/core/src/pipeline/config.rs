use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::BlockDims;
use crate::error::{Error, Result};
use crate::fusion::DEFAULT_ALIGN_LEN;
use crate::hierarchy::PoolMode;
use crate::ssm::DiscretizationMode;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub e: usize,
    pub n: usize,
    pub w: usize,
    pub t_bins: usize,
    /// Hidden width of each per-function genomics MLP.
    pub hidden: usize,
    /// Bi-Mamba blocks per HIM level.
    pub depth: usize,
    /// Upper bound on the fine-level alignment length.
    pub align_len: usize,
    pub mode: DiscretizationMode,
    pub pool: PoolMode,
    /// Initial pre-sigmoid value of the fine/coarse mixing weight.
    pub alpha_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            e: 64,
            n: 16,
            w: 4,
            t_bins: 4,
            hidden: 32,
            depth: 1,
            align_len: DEFAULT_ALIGN_LEN,
            mode: DiscretizationMode::Euler,
            pool: PoolMode::Mean,
            alpha_init: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self) -> BlockDims {
        BlockDims {
            d: self.d,
            e: self.e,
            n: self.n,
            w: self.w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d", self.d),
            ("e", self.e),
            ("n", self.n),
            ("w", self.w),
            ("hidden", self.hidden),
            ("depth", self.depth),
            ("align_len", self.align_len),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.t_bins < 2 {
            return Err(Error::config("t_bins must be at least 2"));
        }
        if !self.alpha_init.is_finite() {
            return Err(Error::config("alpha_init must be finite"));
        }
        Ok(())
    }
}

/// Optimizer and schedule settings plus the model they train.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 5e-3,
            batch_size: 1,
            epochs: 20,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::config("lr and eps must be positive, weight_decay non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

impl ModelConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_json() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "model": {"d": 8, "mode": "zoh"}}"#).unwrap();
        assert_eq!(cfg.lr, 2e-4);
        assert_eq!(cfg.weight_decay, 5e-3);
        assert_eq!(cfg.batch_size, 1);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.model.d, 8);
        assert_eq!(cfg.model.mode, DiscretizationMode::Zoh);
        cfg.validate().unwrap();
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 1}"#).is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"model": {"mode": "rk4"}}"#).is_err());
    }
}
