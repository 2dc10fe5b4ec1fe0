use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::PatchConfig;

/// Architecture hyperparameters. Flat so it maps onto one config section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_len: usize,
    pub stride: usize,
    pub repatch_len: usize,
    pub base_dim: usize,
    pub max_len: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_depth: usize,
    /// Weight of the feature-norm penalty in the pretraining loss.
    pub alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let patch = PatchConfig::default();
        Self {
            patch_len: patch.patch_len,
            stride: patch.stride,
            repatch_len: patch.repatch_len,
            base_dim: patch.base_dim,
            max_len: patch.max_len,
            heads: 8,
            d_ff: 2048,
            encoder_depth: 1,
            alpha: 1e-4,
        }
    }
}

impl ModelConfig {
    pub fn patch(&self) -> PatchConfig {
        PatchConfig {
            patch_len: self.patch_len,
            stride: self.stride,
            repatch_len: self.repatch_len,
            base_dim: self.base_dim,
            max_len: self.max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.patch().validate()?;
        if self.heads == 0 || self.base_dim % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!(
                    "base_dim {} must be divisible by heads {}",
                    self.base_dim, self.heads
                ),
            ));
        }
        if self.d_ff == 0 {
            return Err(Error::config("d_ff", "must be at least 1"));
        }
        if self.encoder_depth == 0 {
            return Err(Error::config("encoder_depth", "must be at least 1"));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::config("alpha", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn max_layers(&self) -> usize {
        self.patch().max_layers()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.max_layers(), 7);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            ModelConfig { heads: 3, ..Default::default() },
            ModelConfig { alpha: -1.0, ..Default::default() },
            ModelConfig { repatch_len: 1, ..Default::default() },
            ModelConfig { max_len: 8, ..Default::default() },
            ModelConfig { stride: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config { .. })), "{c:?}");
        }
    }
}
