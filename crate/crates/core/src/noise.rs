//! Heteroscedastic sensor noise and the synthetic paired benchmark.
//!
//! A clean intensity `x` is observed as `y ~ N(x, λ_read + λ_shot·x)`. Camera
//! parameters drive both the noise parameters (through the sensor gain set by
//! ISO) and the amount of light reaching the sensor (through exposure time and
//! aperture).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraParams, ParamRange};
use crate::error::Result;
use crate::image::Image;

/// Read-noise variance and shot-noise gain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub lambda_read: f64,
    pub lambda_shot: f64,
}

impl NoiseParams {
    pub fn variance_at(&self, x: f64) -> f64 {
        self.lambda_read + self.lambda_shot * x
    }
}

/// Constants of the camera → noise and camera → exposure mappings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseCalib {
    /// `λ_read = k_read · g²` with gain `g = iso / 100`.
    pub k_read: f64,
    /// `λ_shot = k_shot · g`.
    pub k_shot: f64,
    /// Shutter speed (s⁻¹) and F-number at which the light factor is 1.
    pub ref_shutter: f64,
    pub ref_f_number: f64,
}

impl Default for NoiseCalib {
    fn default() -> Self {
        Self {
            k_read: 1e-6,
            k_shot: 1e-4,
            ref_shutter: 30.0,
            ref_f_number: 2.0,
        }
    }
}

pub fn params_to_noise(params: &CameraParams, calib: &NoiseCalib) -> Result<NoiseParams> {
    params.validate()?;
    let gain = params.iso / 100.0;
    Ok(NoiseParams {
        lambda_read: calib.k_read * gain * gain,
        lambda_shot: calib.k_shot * gain,
    })
}

/// Relative light reaching the sensor: proportional to exposure time and to
/// aperture area (`1/f²`). Fixed-aperture devices use the reference F-number.
pub fn light_factor(params: &CameraParams, calib: &NoiseCalib) -> f64 {
    let f = params.f_number.unwrap_or(calib.ref_f_number);
    (calib.ref_shutter / params.shutter_speed) * (calib.ref_f_number / f).powi(2)
}

/// Draw `x + sqrt(λ_read + λ_shot·x)·z` per pixel, without clipping.
pub fn sample_heteroscedastic(x: &Image, noise: &NoiseParams, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.clone();
    for v in out.data_mut() {
        let var = noise.variance_at(*v as f64).max(0.0);
        let z: f64 = rng.sample(StandardNormal);
        *v = (*v as f64 + var.sqrt() * z) as f32;
    }
    out
}

/// A clean scene to be photographed with `params`; `seed` fixes the noise draw.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub clean: Image,
    pub params: CameraParams,
    pub seed: u64,
}

/// Simulate a capture. Returns `(noisy, clean_reference)` where the reference is
/// the exposure-scaled, clipped scene.
pub fn capture(scene: &SceneSpec, calib: &NoiseCalib) -> Result<(Image, Image)> {
    let noise = params_to_noise(&scene.params, calib)?;
    let ell = light_factor(&scene.params, calib) as f32;
    let mut x_cap = scene.clean.clone();
    x_cap
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = (*v * ell).clamp(0.0, 1.0));
    let noisy = sample_heteroscedastic(&x_cap, &noise, scene.seed).clamped();
    Ok((noisy, x_cap))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// ISO log-uniform, shutter speed rising with ISO (auto-exposure behaviour).
    Correlated,
    /// Each parameter log-uniform and independent.
    Independent,
}

/// Ranges and coupling of the camera-parameter sampler.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub iso: ParamRange,
    pub shutter: ParamRange,
    pub fnum: ParamRange,
    /// `ln shutter = ln pivot_shutter + slope·(ln iso − ln pivot_iso) + jitter·z`.
    pub slope: f64,
    pub pivot_iso: f64,
    pub pivot_shutter: f64,
    pub jitter: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            iso: ParamRange::new(100.0, 6400.0).expect("valid"),
            shutter: ParamRange::new(2.0, 1000.0).expect("valid"),
            fnum: ParamRange::new(2.0, 2.8).expect("valid"),
            slope: 0.35,
            pivot_iso: 400.0,
            pivot_shutter: 30.0,
            jitter: 0.25,
        }
    }
}

fn log_uniform<R: Rng>(rng: &mut R, r: &ParamRange) -> f64 {
    rng.random_range(r.lo().ln()..=r.hi().ln()).exp()
}

pub fn sample_params<R: Rng>(rng: &mut R, mode: SampleMode, cfg: &SamplerConfig) -> CameraParams {
    let iso = log_uniform(rng, &cfg.iso);
    let shutter = match mode {
        SampleMode::Correlated => {
            let z: f64 = rng.sample(StandardNormal);
            let ln = cfg.pivot_shutter.ln() + cfg.slope * (iso.ln() - cfg.pivot_iso.ln()) + cfg.jitter * z;
            cfg.shutter.clamp(ln.exp())
        }
        SampleMode::Independent => log_uniform(rng, &cfg.shutter),
    };
    let f = log_uniform(rng, &cfg.fnum);
    CameraParams::with_f_number(iso, shutter, f)
}

/// One synthetic pair with the values it was generated from.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub index: usize,
    pub noisy: Image,
    pub clean: Image,
    pub params: CameraParams,
    pub noise: NoiseParams,
    pub seed: u64,
}

/// SplitMix64 finalizer; used to derive independent per-item seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Procedural RGB scene: a smooth two-colour gradient, a few opaque rectangles and a
/// band-limited sinusoidal texture.
pub fn procedural_scene(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f32;
    let c0: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let c1: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());

    struct Rect {
        y0: f32,
        x0: f32,
        y1: f32,
        x1: f32,
        color: [f32; 3],
    }
    let rects: Vec<Rect> = (0..rng.random_range(1..=4))
        .map(|_| {
            let (h, w) = (rng.random_range(0.15..0.6) * s, rng.random_range(0.15..0.6) * s);
            let (y0, x0) = (rng.random_range(-0.2..0.9) * s, rng.random_range(-0.2..0.9) * s);
            Rect {
                y0,
                x0,
                y1: y0 + h,
                x1: x0 + w,
                color: std::array::from_fn(|_| rng.random_range(0.05..0.95)),
            }
        })
        .collect();

    // (frequency y, frequency x, phase, amplitude, per-channel tint)
    let waves: Vec<(f32, f32, f32, f32, [f32; 3])> = (0..3)
        .map(|_| {
            let f = rng.random_range(0.03..0.3) * std::f32::consts::TAU;
            let a: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            (
                f * a.sin(),
                f * a.cos(),
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(0.02..0.1),
                std::array::from_fn(|_| rng.random_range(0.5..1.0)),
            )
        })
        .collect();

    Image::from_fn(3, size, size, |c, y, x| {
        let (yf, xf) = (y as f32 + 0.5, x as f32 + 0.5);
        let t = ((xf * dx + yf * dy) / s + 1.0) / 2.0;
        let mut v = c0[c] * (1.0 - t) + c1[c] * t;
        for r in &rects {
            if yf >= r.y0 && yf < r.y1 && xf >= r.x0 && xf < r.x1 {
                v = r.color[c];
            }
        }
        for (fy, fx, ph, amp, tint) in &waves {
            v += amp * tint[c] * (fy * yf + fx * xf + ph).sin();
        }
        v.clamp(0.0, 1.0)
    })
}

/// Build `n` synthetic pairs of `patch × patch` pixels. Item `i` depends only on
/// `(seed, i)`.
pub fn make_dataset(
    n: usize,
    patch: usize,
    calib: &NoiseCalib,
    sampler: &SamplerConfig,
    mode: SampleMode,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    (0..n)
        .map(|i| {
            let item_seed = mix_seed(seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
            let params = sample_params(&mut rng, mode, sampler);
            let scene = SceneSpec {
                clean: procedural_scene(patch, mix_seed(item_seed, 1)),
                params,
                seed: mix_seed(item_seed, 2),
            };
            let (noisy, clean) = capture(&scene, calib)?;
            Ok(SyntheticSample {
                index: i,
                noisy,
                clean,
                params,
                noise: params_to_noise(&params, calib)?,
                seed: item_seed,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::spearman;

    #[test]
    fn gain_mapping_values() {
        let c = NoiseCalib::default();
        let at = |iso| params_to_noise(&CameraParams::with_f_number(iso, 30.0, 2.0), &c).unwrap();
        assert_eq!(
            at(100.0),
            NoiseParams {
                lambda_read: 1e-6,
                lambda_shot: 1e-4
            }
        );
        let n400 = at(400.0);
        assert!((n400.lambda_read - 1.6e-5).abs() < 1e-20);
        assert!((n400.lambda_shot - 4e-4).abs() < 1e-18);
        assert!((at(3200.0).lambda_read / at(100.0).lambda_read - 1024.0).abs() < 1e-9);
    }

    #[test]
    fn light_factor_scaling() {
        let c = NoiseCalib::default();
        let p = CameraParams::with_f_number(100.0, 30.0, 2.0);
        assert_eq!(light_factor(&p, &c), 1.0);
        let slower = CameraParams {
            shutter_speed: 15.0,
            ..p
        };
        assert!((light_factor(&slower, &c) - 2.0).abs() < 1e-12);
        let narrower = CameraParams {
            f_number: Some(4.0),
            ..p
        };
        assert!((light_factor(&narrower, &c) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_capture_is_exact() {
        let calib = NoiseCalib {
            k_read: 0.0,
            k_shot: 0.0,
            ..Default::default()
        };
        let scene = SceneSpec {
            clean: procedural_scene(16, 3),
            params: CameraParams::with_f_number(800.0, 30.0, 2.0),
            seed: 9,
        };
        let (y, x) = capture(&scene, &calib).unwrap();
        assert_eq!(y, x);
        assert_eq!(x, scene.clean);
    }

    #[test]
    fn capture_is_deterministic() {
        let scene = SceneSpec {
            clean: procedural_scene(16, 3),
            params: CameraParams::with_f_number(3200.0, 60.0, 2.8),
            seed: 11,
        };
        let c = NoiseCalib::default();
        assert_eq!(capture(&scene, &c).unwrap(), capture(&scene, &c).unwrap());
    }

    #[test]
    fn mid_gray_variance_matches_model() {
        let x = Image::filled(1, 1000, 1000, 0.5);
        let noise = NoiseParams {
            lambda_read: 1e-4,
            lambda_shot: 1e-3,
        };
        let y = sample_heteroscedastic(&x, &noise, 5);
        let n = y.data().len() as f64;
        let mean = y.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = y.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 6e-4).abs() / 6e-4 < 0.02, "variance {var}");
        // unbiased: |mean - x| within 3σ/√n
        assert!((mean - 0.5).abs() < 3.0 * (6e-4f64).sqrt() / n.sqrt());
    }

    #[test]
    fn sampler_correlation_modes() {
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draw = |rng: &mut ChaCha8Rng, mode| -> (Vec<f64>, Vec<f64>) {
            (0..10_000)
                .map(|_| sample_params(rng, mode, &cfg))
                .map(|p| (p.iso, p.shutter_speed))
                .unzip()
        };
        let (iso, ss) = draw(&mut rng, SampleMode::Correlated);
        assert!(spearman(&iso, &ss) > 0.5);
        let (iso, ss) = draw(&mut rng, SampleMode::Independent);
        assert!(spearman(&iso, &ss).abs() < 0.1);
    }

    #[test]
    fn sampled_params_stay_in_ranges() {
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for mode in [SampleMode::Correlated, SampleMode::Independent] {
            for _ in 0..2000 {
                let p = sample_params(&mut rng, mode, &cfg);
                assert!(cfg.iso.contains(p.iso));
                assert!(cfg.shutter.contains(p.shutter_speed));
                assert!(cfg.fnum.contains(p.f_number.unwrap()));
            }
        }
    }

    #[test]
    fn dataset_reproducible_and_empty_case() {
        let (c, s) = (NoiseCalib::default(), SamplerConfig::default());
        assert!(make_dataset(0, 16, &c, &s, SampleMode::Correlated, 7)
            .unwrap()
            .is_empty());
        let a = make_dataset(64, 16, &c, &s, SampleMode::Correlated, 7).unwrap();
        let b = make_dataset(64, 16, &c, &s, SampleMode::Correlated, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn residual_grows_with_iso() {
        let (c, s) = (NoiseCalib::default(), SamplerConfig::default());
        let data = make_dataset(1000, 16, &c, &s, SampleMode::Correlated, 3).unwrap();
        let iso: Vec<f64> = data.iter().map(|d| d.params.iso).collect();
        let mad: Vec<f64> = data
            .iter()
            .map(|d| {
                d.noisy
                    .data()
                    .iter()
                    .zip(d.clean.data())
                    .map(|(a, b)| (a - b).abs() as f64)
                    .sum::<f64>()
                    / d.noisy.data().len() as f64
            })
            .collect();
        assert!(spearman(&iso, &mad) > 0.5);
    }

    #[test]
    fn mean_squared_residual_monotone_in_iso() {
        let calib = NoiseCalib::default();
        let clean = procedural_scene(32, 21);
        let msr: Vec<f64> = [100.0, 400.0, 1600.0, 6400.0]
            .iter()
            .map(|&iso| {
                let scene = SceneSpec {
                    clean: clean.clone(),
                    params: CameraParams::with_f_number(iso, 30.0, 2.0),
                    seed: 77,
                };
                let (y, x) = capture(&scene, &calib).unwrap();
                y.data()
                    .iter()
                    .zip(x.data())
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
            })
            .collect();
        assert!(msr.windows(2).all(|w| w[0] <= w[1]), "{msr:?}");
    }
}
