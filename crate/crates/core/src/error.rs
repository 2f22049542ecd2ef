use std::path::PathBuf;

/// Errors produced anywhere in the core crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid camera parameters: {0}")]
    InvalidParams(String),

    #[error("no normalization range configured for {0}")]
    MissingRange(&'static str),

    #[error("device code {code} out of range for {n_devices} devices")]
    DeviceOutOfRange { code: usize, n_devices: usize },

    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("non-finite loss {loss} at iteration {iter} (lr {lr:e}); recent losses: {recent:?}")]
    NonFiniteLoss {
        iter: usize,
        lr: f64,
        loss: f64,
        recent: Vec<f64>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
