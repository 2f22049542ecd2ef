//! Planar float images and 8-bit PNG I/O.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// Channel-major `C×H×W` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Domain(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn clamped(&self) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    /// Round-trip through 8-bit quantization.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = to_byte(*v) as f32 / 255.0);
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Domain(format!(
                "crop {height}x{width}@({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(self.channels, height, width, |c, y, x| {
            self.at(c, top + y, left + x)
        }))
    }

    pub fn flipped_horizontal(&self) -> Self {
        Self::from_fn(self.channels, self.height, self.width, |c, y, x| {
            self.at(c, y, self.width - 1 - x)
        })
    }

    pub fn flipped_vertical(&self) -> Self {
        Self::from_fn(self.channels, self.height, self.width, |c, y, x| {
            self.at(c, self.height - 1 - y, x)
        })
    }

    /// Reflect-pad bottom/right so both sides become multiples of `m`.
    pub fn reflect_pad_to_multiple(&self, m: usize) -> Result<Self> {
        let (ph, pw) = (self.height.div_ceil(m) * m, self.width.div_ceil(m) * m);
        if ph == self.height && pw == self.width {
            return Ok(self.clone());
        }
        if ph - self.height >= self.height.max(2) || pw - self.width >= self.width.max(2) {
            return Err(Error::Domain(format!(
                "image {}x{} too small to reflect-pad to a multiple of {m}",
                self.height, self.width
            )));
        }
        let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
        Ok(Self::from_fn(self.channels, ph, pw, |c, y, x| {
            self.at(c, reflect(y, self.height), reflect(x, self.width))
        }))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn to_rgb8(&self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(Error::Domain(format!("expected 3 channels, got {}", self.channels)));
        }
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            let (x, y) = (x as usize, y as usize);
            *px = image::Rgb([0, 1, 2].map(|c| to_byte(self.at(c, y, x))));
        }
        Ok(img)
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(3, h, w, |c, y, x| img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()?.save_with_format(path, ImageFormat::Png)?;
        Ok(())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8()?.write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    /// Downscale so the longer side is at most `max_side`; smaller images are returned as is.
    pub fn thumbnail(&self, max_side: usize) -> Result<Self> {
        let long = self.height.max(self.width);
        if long <= max_side || max_side == 0 {
            return Ok(self.clone());
        }
        let scale = max_side as f64 / long as f64;
        let h = ((self.height as f64 * scale).round() as u32).max(1);
        let w = ((self.width as f64 * scale).round() as u32).max(1);
        let small = image::imageops::resize(&self.to_rgb8()?, w, h, image::imageops::FilterType::Triangle);
        Ok(Self::from_rgb8(&small))
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Stack same-sized images into an `(N, C, H, W)` tensor.
pub fn batch_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Domain("empty batch".into()))?;
    let (c, h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.dims() != (c, h, w) {
            return Err(Error::Domain(format!(
                "batch images differ in size: {:?} vs {:?}",
                img.dims(),
                (c, h, w)
            )));
        }
        data.extend(img.data().iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new(&[images.len(), c, h, w], data)
}

/// Split an `(N, C, H, W)` tensor back into images.
pub fn unbatch<T: Real>(t: &Tensor<T>) -> Result<Vec<Image>> {
    let (n, c, h, w) = t.dims4("unbatch")?;
    Ok(t.data()
        .chunks(c * h * w)
        .take(n)
        .map(|s| Image {
            channels: c,
            height: h,
            width: w,
            data: s.iter().map(|&v| Real::to_f64(v) as f32).collect(),
        })
        .collect())
}
