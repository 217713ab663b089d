use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub context_len: usize,
    /// The residual stream entering this layer is the hook point.
    pub hook_layer: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: super::vocab_size(),
            d_model: 32,
            n_layers: 4,
            n_heads: 4,
            d_mlp: 128,
            context_len: 32,
            hook_layer: 2,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
            ("context_len", self.context_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("lm.{name} must be positive")));
            }
        }
        if self.hook_layer >= self.n_layers {
            return Err(Error::InvalidConfig(format!(
                "lm.hook_layer {} must be below n_layers {}",
                self.hook_layer, self.n_layers
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "lm.d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(LmConfig::default().validate().is_ok());
        let bad_hook = LmConfig {
            hook_layer: 4,
            ..LmConfig::default()
        };
        assert!(bad_hook.validate().is_err());
        let bad_heads = LmConfig {
            n_heads: 5,
            ..LmConfig::default()
        };
        assert!(bad_heads.validate().is_err());
    }
}
