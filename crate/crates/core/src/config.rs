//! Model architecture configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters for the encoder and its per-layer plugins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub classifier_inner_dim: usize,
    pub gate_inner_dim: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy()
    }
}

impl ModelConfig {
    /// Minutes-scale CPU configuration.
    pub fn toy() -> Self {
        ModelConfig {
            num_layers: 6,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            vocab_size: 64,
            max_seq_len: 32,
            num_classes: 2,
            classifier_inner_dim: 32,
            gate_inner_dim: 32,
            dropout_rate: 0.0,
        }
    }

    /// BERT-base dimensions, used only to calibrate the analytic FLOPs
    /// ledger against published per-operation costs.
    pub fn bert_base_calibration() -> Self {
        ModelConfig {
            num_layers: 12,
            hidden_dim: 768,
            num_heads: 12,
            ffn_dim: 3072,
            vocab_size: 30522,
            max_seq_len: 128,
            num_classes: 2,
            classifier_inner_dim: 64,
            gate_inner_dim: 64,
            dropout_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.hidden_dim == 0
            || self.num_heads == 0
            || self.ffn_dim == 0
            || self.vocab_size == 0
            || self.max_seq_len == 0
            || self.classifier_inner_dim == 0
            || self.gate_inner_dim == 0
        {
            return Err(Error::InvalidConfig("all dimensions must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_configs_validate() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::bert_base_calibration().validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig::toy();
        c.num_heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.num_classes = 1;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
    }
}
