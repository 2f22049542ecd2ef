//! Image quality metrics, computed in double precision.

use crate::error::{Error, Result};
use crate::image::Image;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_dims(op: &str, a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Domain(format!(
            "{op}: image sizes differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if a.data().is_empty() {
        return Err(Error::Domain(format!("{op}: empty image")));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_dims("mse", a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.data().len() as f64)
}

/// `10·log10(peak² / MSE)` over raw values, capped at [`PSNR_CAP`].
pub fn psnr_values(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Domain(format!("psnr: lengths {} and {}", a.len(), b.len())));
    }
    let m = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(psnr_from_mse(m, peak))
}

fn psnr_from_mse(m: f64, peak: f64) -> f64 {
    if m == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / m).log10()).min(PSNR_CAP)
}

pub fn psnr_with_peak(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    psnr_with_peak(a, b, 1.0)
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - mid).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// "Valid" separable filtering of one `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Window means of the luminance term, the contrast-structure term and their product
/// (the SSIM index), averaged over all channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimComponents {
    pub luminance: f64,
    pub contrast_structure: f64,
    pub ssim: f64,
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5) over every window
/// position fully inside the image; peak value 1.
pub fn ssim_components(a: &Image, b: &Image) -> Result<SsimComponents> {
    same_dims("ssim", a, b)?;
    let (c, h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Domain(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = (SSIM_K1.powi(2), SSIM_K2.powi(2));
    let plane = |img: &Image, ch: usize| -> Vec<f64> {
        img.data()[ch * h * w..(ch + 1) * h * w]
            .iter()
            .map(|&v| v as f64)
            .collect()
    };
    let (mut lum, mut cs, mut idx, mut count) = (0.0, 0.0, 0.0, 0usize);
    for ch in 0..c {
        let (pa, pb) = (plane(a, ch), plane(b, ch));
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
        let mu_a = filter_valid(&pa, h, w, &taps);
        let mu_b = filter_valid(&pb, h, w, &taps);
        let e_aa = filter_valid(&prod(&pa, &pa), h, w, &taps);
        let e_bb = filter_valid(&prod(&pb, &pb), h, w, &taps);
        let e_ab = filter_valid(&prod(&pa, &pb), h, w, &taps);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            let s = (2.0 * cov + c2) / (va + vb + c2);
            lum += l;
            cs += s;
            idx += l * s;
            count += 1;
        }
    }
    let n = count as f64;
    Ok(SsimComponents {
        luminance: lum / n,
        contrast_structure: cs / n,
        ssim: idx / n,
    })
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_components(a, b)?.ssim)
}

/// Mean absolute horizontal difference plus mean absolute vertical difference.
pub fn total_variation(img: &Image) -> f64 {
    let (c, h, w) = img.dims();
    let (mut sh, mut nh, mut sv, mut nv) = (0.0, 0usize, 0.0, 0usize);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = img.at(ch, y, x) as f64;
                if x + 1 < w {
                    sh += (img.at(ch, y, x + 1) as f64 - v).abs();
                    nh += 1;
                }
                if y + 1 < h {
                    sv += (img.at(ch, y + 1, x) as f64 - v).abs();
                    nv += 1;
                }
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    mean(sh, nh) + mean(sv, nv)
}

/// `‖a − b‖²` summed over all pixels and channels.
pub fn residual_energy(a: &Image, b: &Image) -> Result<f64> {
    same_dims("residual_energy", a, b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum())
}
