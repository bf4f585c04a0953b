use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::{effective_rope, InterpolationStrategy, RopeParams, DEFAULT_BASE};

fn default_ffn_mult() -> usize {
    4
}

fn default_rope_base() -> f64 {
    DEFAULT_BASE
}

fn default_init_std() -> f64 {
    0.02
}

/// Shape of the decoder-only transformer and how it encodes positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default)]
    pub interpolation: InterpolationStrategy,
    /// Original context window `L_c`.
    pub train_window: usize,
    /// Extended context window `L_t`.
    pub target_window: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            ffn_mult: default_ffn_mult(),
            rope_base: DEFAULT_BASE,
            interpolation: InterpolationStrategy::none(),
            train_window: 64,
            target_window: 256,
            init_std: default_init_std(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("model.vocab_size must be at least 2"));
        }
        if self.n_layers < 1 {
            return Err(Error::config("model.n_layers must be at least 1"));
        }
        if self.n_heads < 1 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config("model.d_model must be a multiple of model.n_heads"));
        }
        if self.head_dim() < 2 || !self.head_dim().is_multiple_of(2) {
            return Err(Error::config("model head_dim must be even"));
        }
        if self.ffn_mult < 1 {
            return Err(Error::config("model.ffn_mult must be at least 1"));
        }
        if self.train_window < 1 || self.target_window < self.train_window {
            return Err(Error::config("model.target_window must be >= model.train_window >= 1"));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::config("model.init_std must be positive"));
        }
        self.interpolation.validate()?;
        Ok(())
    }

    /// Frequency table and logit multiplier after interpolation.
    pub fn rope(&self) -> Result<RopeParams> {
        let base = RopeParams::new(self.head_dim(), self.rope_base)?;
        effective_rope(&self.interpolation, &base, self.train_window)
    }
}
