use serde::{Deserialize, Serialize};

use crate::camera::{ParamRanges, COND_DIM};
use crate::error::{Error, Result};

/// Number of resolution levels above the bottleneck.
pub const LEVELS: usize = 3;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Channels at full resolution; doubled at each downsampling.
    pub width: usize,
    /// Blocks per encoder level, full resolution first.
    pub enc_blocks: [usize; LEVELS],
    pub bottom_blocks: usize,
    /// Blocks per decoder level, indexed like `enc_blocks`.
    pub dec_blocks: [usize; LEVELS],
    pub cond_dim: usize,
    /// Hidden width of each block's modulation MLP as a multiple of the block's channels.
    pub mlp_hidden_ratio: f64,
    pub dropout: f64,
    /// Rows of the learned device embedding used when the F-number is unknown.
    pub n_devices: usize,
    /// `false` builds the baseline: plain layer norm with a learned per-channel affine.
    pub conditioned: bool,
    /// Normalization ranges used to encode camera parameters for this model.
    pub ranges: ParamRanges,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Full-size network.
    pub fn full() -> Self {
        Self {
            width: 32,
            enc_blocks: [4, 4, 4],
            bottom_blocks: 8,
            dec_blocks: [8, 8, 8],
            cond_dim: COND_DIM,
            mlp_hidden_ratio: 0.5,
            dropout: 0.2,
            n_devices: 5,
            conditioned: true,
            ranges: ParamRanges::default(),
        }
    }

    /// CPU-sized network.
    pub fn desk() -> Self {
        Self {
            width: 8,
            enc_blocks: [1, 1, 1],
            bottom_blocks: 1,
            dec_blocks: [1, 1, 1],
            cond_dim: COND_DIM,
            mlp_hidden_ratio: 2.0,
            dropout: 0.2,
            n_devices: 5,
            conditioned: true,
            ranges: ParamRanges::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn baseline(mut self) -> Self {
        self.conditioned = false;
        self
    }

    pub fn with_conditioned(mut self, conditioned: bool) -> Self {
        self.conditioned = conditioned;
        self
    }

    /// Channels at level `l` (0 = full resolution, `LEVELS` = bottleneck).
    pub fn channels(&self, level: usize) -> usize {
        self.width << level
    }

    pub fn mlp_hidden(&self, channels: usize) -> usize {
        ((self.mlp_hidden_ratio * channels as f64).round() as usize).max(1)
    }

    /// Spatial sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << LEVELS
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("width must be positive".into()));
        }
        if self.cond_dim != COND_DIM {
            return Err(Error::Config(format!(
                "cond_dim must be {COND_DIM}, got {}",
                self.cond_dim
            )));
        }
        if !(self.mlp_hidden_ratio.is_finite() && self.mlp_hidden_ratio > 0.0) {
            return Err(Error::Config("mlp_hidden_ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}
