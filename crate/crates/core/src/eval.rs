//! Inference on arbitrary-size images, controllability sweeps and evaluation reports.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::camera::CameraParams;
use crate::data::PairedSample;
use crate::error::{Error, Result};
use crate::image::{batch_tensor, unbatch, Image};
use crate::metrics::{psnr, residual_energy, ssim, total_variation};
use crate::net::{Accounting, CpadNet};
use crate::stats::mean;

/// Denoise one image of any size: reflect-pad to the network's size multiple, run,
/// crop back and clip to `[0, 1]`.
pub fn denoise_image<T: Real>(net: &CpadNet<T>, img: &Image, params: &CameraParams) -> Result<Image> {
    params.validate()?;
    let padded = img.reflect_pad_to_multiple(net.config().size_multiple())?;
    let x = batch_tensor::<T>(&[&padded])?;
    let y = net.denoise(&x, Some(std::slice::from_ref(params)))?;
    let out = unbatch(&y)?.pop().expect("batch of one");
    Ok(out.crop(0, 0, img.height(), img.width())?.clamped())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Iso,
    Shutter,
    Fnum,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iso" => Ok(Self::Iso),
            "shutter" => Ok(Self::Shutter),
            "fnum" => Ok(Self::Fnum),
            other => Err(Error::InvalidParams(format!(
                "unknown sweep axis {other:?} (iso|shutter|fnum)"
            ))),
        }
    }
}

impl SweepAxis {
    /// `base` with this axis set to `value`. Setting the F-number drops any device code.
    pub fn apply(self, base: &CameraParams, value: f64) -> CameraParams {
        let mut p = *base;
        match self {
            Self::Iso => p.iso = value,
            Self::Shutter => p.shutter_speed = value,
            Self::Fnum => {
                p.f_number = Some(value);
                p.device_code = None;
            }
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub value: f64,
    pub tv: f64,
    /// `‖out − noisy‖²`: how much the network removed.
    pub residual_energy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepStep {
    pub record: SweepRecord,
    pub output: Image,
}

/// Denoise `noisy` once per grid value with one camera parameter overridden.
pub fn sweep<T: Real>(
    net: &CpadNet<T>,
    noisy: &Image,
    clean: Option<&Image>,
    base: &CameraParams,
    axis: SweepAxis,
    grid: &[f64],
) -> Result<Vec<SweepStep>> {
    grid.iter()
        .map(|&value| {
            let out = denoise_image(net, noisy, &axis.apply(base, value))?;
            Ok(SweepStep {
                record: SweepRecord {
                    value,
                    tv: total_variation(&out),
                    residual_energy: residual_energy(&out, noisy)?,
                    psnr: clean.map(|c| psnr(&out, c)).transpose()?,
                },
                output: out,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Scores of the unprocessed noisy input.
    pub psnr_noisy: f64,
    pub ssim_noisy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub index: usize,
    pub axis: SweepAxis,
    pub records: Vec<SweepRecord>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub images: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_psnr_noisy: f64,
    pub mean_ssim_noisy: f64,
    pub accounting: Accounting,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sweeps: Vec<SweepReport>,
}

/// Score every sample; when `sweep_grid` is given, also sweep ISO over it.
pub fn evaluate<T: Real>(net: &CpadNet<T>, samples: &[PairedSample], sweep_grid: Option<&[f64]>) -> Result<EvalReport> {
    let mut images = Vec::with_capacity(samples.len());
    let mut sweeps = Vec::new();
    for (index, s) in samples.iter().enumerate() {
        let out = denoise_image(net, &s.noisy, &s.params)?;
        images.push(ImageScore {
            index,
            psnr: psnr(&out, &s.clean)?,
            ssim: ssim(&out, &s.clean)?,
            psnr_noisy: psnr(&s.noisy, &s.clean)?,
            ssim_noisy: ssim(&s.noisy, &s.clean)?,
        });
        if let Some(grid) = sweep_grid {
            let steps = sweep(net, &s.noisy, Some(&s.clean), &s.params, SweepAxis::Iso, grid)?;
            sweeps.push(SweepReport {
                index,
                axis: SweepAxis::Iso,
                records: steps.into_iter().map(|st| st.record).collect(),
            });
        }
    }
    let avg = |f: fn(&ImageScore) -> f64| mean(&images.iter().map(f).collect::<Vec<_>>());
    Ok(EvalReport {
        mean_psnr: avg(|s| s.psnr),
        mean_ssim: avg(|s| s.ssim),
        mean_psnr_noisy: avg(|s| s.psnr_noisy),
        mean_ssim_noisy: avg(|s| s.ssim_noisy),
        images,
        accounting: Accounting::of(net.config(), 256, 256),
        sweeps,
    })
}

/// Whether residual energy never decreases along the (increasing) grid.
pub fn is_nondecreasing(records: &[SweepRecord]) -> bool {
    records.windows(2).all(|w| w[0].residual_energy <= w[1].residual_energy)
}
