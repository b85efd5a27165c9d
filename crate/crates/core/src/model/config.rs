use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature width `C`.
    pub channels: usize,
    /// Upscaling factor. Only 4 is supported.
    pub scale: usize,
    /// Residual blocks in the feature extractor.
    pub fe_blocks: usize,
    /// Residual blocks in each propagation branch.
    pub prop_blocks: usize,
    /// Residual blocks in the reconstruction head.
    pub rec_blocks: usize,
    /// Gated collaborative feed-forward blocks after the feedback ConvGRU.
    pub gcfb_count: usize,
    /// Backward/forward propagation rounds.
    pub prop_rounds: usize,
    /// Root seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64,
            scale: 4,
            fe_blocks: 5,
            prop_blocks: 10,
            rec_blocks: 3,
            gcfb_count: 5,
            prop_rounds: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Every block count set to one, with `channels` features.
    pub fn tiny(channels: usize) -> Self {
        ModelConfig {
            channels,
            fe_blocks: 1,
            prop_blocks: 1,
            rec_blocks: 1,
            gcfb_count: 1,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("channels", self.channels),
            ("fe_blocks", self.fe_blocks),
            ("prop_blocks", self.prop_blocks),
            ("rec_blocks", self.rec_blocks),
            ("gcfb_count", self.gcfb_count),
            ("prop_rounds", self.prop_rounds),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if self.scale != 4 {
            return Err(Error::Config(format!("model.scale must be 4, got {}", self.scale)));
        }
        Ok(())
    }
}
