//! The conditioned denoising network, its baseline variant and model accounting.

pub mod accounting;
pub mod checkpoint;
mod config;
pub mod gradcheck;
mod model;

pub use accounting::{count_macs, count_params, Accounting};
pub use config::{ModelConfig, LEVELS};
pub use model::{adaln, adaln_modulation, modulated_norm, Cond, CpadNet, Mode, Modulation};
