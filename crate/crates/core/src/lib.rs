//! Camera-parameter conditioned image denoising.

pub mod autodiff;
pub mod camera;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod metrics;
pub mod net;
pub mod noise;
pub mod stats;
pub mod train;

pub use camera::{encode, CameraParams, ConditionVector, ParamRange, ParamRanges};
pub use data::PairedSample;
pub use error::{Error, Result};
pub use image::Image;
pub use net::{CpadNet, ModelConfig};
pub use train::{RunConfig, TrainConfig};
