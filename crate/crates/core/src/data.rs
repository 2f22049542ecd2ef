//! Paired noisy/clean samples, patch cropping and on-disk dataset layouts.
//!
//! Three layouts are understood:
//! - synthetic: `meta.jsonl` with `clean/%05d.png` and `noisy/%05d.png`;
//! - SID-style: `pairs.tsv` rows `noisy_path clean_path iso exposure_time_s f_number`;
//! - SIDD-style: one directory per scene instance, named after a configurable format
//!   such as `0001_001_S6_00800_00350_3200_L`, holding `NOISY_*` and `GT_*` PNGs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::CameraParams;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::noise::{NoiseParams, SyntheticSample};

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub noisy: Image,
    pub clean: Image,
    pub params: CameraParams,
}

impl PairedSample {
    pub fn new(noisy: Image, clean: Image, params: CameraParams) -> Result<Self> {
        if noisy.dims() != clean.dims() {
            return Err(Error::Domain(format!(
                "noisy {:?} and clean {:?} differ in size",
                noisy.dims(),
                clean.dims()
            )));
        }
        params.validate()?;
        Ok(Self { noisy, clean, params })
    }
}

impl From<SyntheticSample> for PairedSample {
    fn from(s: SyntheticSample) -> Self {
        Self {
            noisy: s.noisy,
            clean: s.clean,
            params: s.params,
        }
    }
}

/// Patch origins along one axis: multiples of `stride`, with the last one moved so
/// the final patch ends flush with the border.
pub fn crop_origins(len: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch == 0 || stride == 0 || stride > patch {
        return Err(Error::Config(format!(
            "need 0 < stride ≤ patch, got stride {stride}, patch {patch}"
        )));
    }
    if len < patch {
        return Err(Error::Domain(format!("image side {len} smaller than patch {patch}")));
    }
    let last = len - patch;
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o < last).collect();
    out.push(last);
    Ok(out)
}

/// Aligned `patch × patch` crops of a pair, row-major over origins.
pub fn crop_patches(sample: &PairedSample, patch: usize, stride: usize) -> Result<Vec<PairedSample>> {
    let ys = crop_origins(sample.noisy.height(), patch, stride)?;
    let xs = crop_origins(sample.noisy.width(), patch, stride)?;
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            out.push(PairedSample {
                noisy: sample.noisy.crop(y, x, patch, patch)?,
                clean: sample.clean.crop(y, x, patch, patch)?,
                params: sample.params,
            });
        }
    }
    Ok(out)
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// One `pairs.tsv` row, whitespace separated.
#[derive(Clone, Debug, PartialEq)]
pub struct SidRow {
    pub noisy: PathBuf,
    pub clean: PathBuf,
    pub params: CameraParams,
}

pub fn parse_sid_row(text: &str, path: &Path, line: usize) -> Result<SidRow> {
    let cols: Vec<&str> = text.split_whitespace().collect();
    if cols.len() != 5 {
        return Err(parse_err(
            path,
            line,
            format!("expected 5 columns, found {}", cols.len()),
        ));
    }
    let num = |i: usize, name: &str| -> Result<f64> {
        cols[i]
            .parse::<f64>()
            .map_err(|_| parse_err(path, line, format!("{name}: not a number: {:?}", cols[i])))
    };
    let (iso, exposure, f) = (num(2, "iso")?, num(3, "exposure_time_s")?, num(4, "f_number")?);
    if !(exposure.is_finite() && exposure > 0.0) {
        return Err(parse_err(
            path,
            line,
            format!("exposure_time_s must be positive, got {exposure}"),
        ));
    }
    let params = CameraParams::with_f_number(iso, 1.0 / exposure, f);
    params.validate().map_err(|e| parse_err(path, line, e.to_string()))?;
    Ok(SidRow {
        noisy: cols[0].into(),
        clean: cols[1].into(),
        params,
    })
}

/// Load a SID-style directory. A directory without `pairs.tsv` is empty.
pub fn load_sid_style(dir: &Path) -> Result<Vec<PairedSample>> {
    let tsv = dir.join("pairs.tsv");
    if !tsv.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(&tsv)?).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') || (i == 0 && t.starts_with("noisy_path")) {
            continue;
        }
        let row = parse_sid_row(t, &tsv, i + 1)?;
        let noisy = Image::load_png(&dir.join(&row.noisy))?;
        let clean = Image::load_png(&dir.join(&row.clean))?;
        out.push(PairedSample::new(noisy, clean, row.params).map_err(|e| parse_err(&tsv, i + 1, e.to_string()))?);
    }
    Ok(out)
}

/// How SIDD-style scene-instance directory names are decoded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SiddFormat {
    /// `_`-separated fields; `{camera}`, `{iso}` and `{shutter}` are required, other
    /// placeholders are ignored.
    pub pattern: String,
    /// Camera field → device code.
    pub cameras: BTreeMap<String, usize>,
    pub noisy_prefix: String,
    pub clean_prefix: String,
}

impl Default for SiddFormat {
    fn default() -> Self {
        Self {
            pattern: "{scene}_{instance}_{camera}_{iso}_{shutter}_{temp}_{brightness}".into(),
            cameras: [("GP", 0), ("IP", 1), ("S6", 2), ("N6", 3), ("G4", 4)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            noisy_prefix: "NOISY".into(),
            clean_prefix: "GT".into(),
        }
    }
}

impl SiddFormat {
    /// Camera parameters encoded in a directory name. The shutter field is read as
    /// a shutter speed in s⁻¹.
    pub fn parse_name(&self, name: &str) -> Result<CameraParams> {
        let bad = |msg: String| Error::Parse {
            path: PathBuf::from(name),
            line: 0,
            msg,
        };
        let fields: Vec<&str> = self.pattern.split('_').collect();
        let parts: Vec<&str> = name.split('_').collect();
        if fields.len() != parts.len() {
            return Err(bad(format!("expected {} fields per {:?}", fields.len(), self.pattern)));
        }
        let get = |key: &str| -> Result<&str> {
            let tag = format!("{{{key}}}");
            fields
                .iter()
                .position(|f| *f == tag)
                .map(|i| parts[i])
                .ok_or_else(|| Error::Config(format!("format {:?} lacks {tag}", self.pattern)))
        };
        let num = |key: &str| -> Result<f64> {
            let s = get(key)?;
            s.parse::<f64>().map_err(|_| bad(format!("{key}: not a number: {s:?}")))
        };
        let camera = get("camera")?;
        let code = *self
            .cameras
            .get(camera)
            .ok_or_else(|| bad(format!("unknown camera {camera:?}")))?;
        let params = CameraParams::with_device(num("iso")?, num("shutter")?, code);
        params.validate().map_err(|e| bad(e.to_string()))?;
        Ok(params)
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Load every scene-instance directory under `dir`, pairing `NOISY_x` with `GT_x`.
pub fn load_sidd_style(dir: &Path, format: &SiddFormat) -> Result<Vec<PairedSample>> {
    let mut out = Vec::new();
    for sub in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        let name = sub.file_name().and_then(|s| s.to_str()).unwrap_or_default();
        let params = format.parse_name(name)?;
        for f in sorted_entries(&sub)? {
            let fname = f.file_name().and_then(|s| s.to_str()).unwrap_or_default();
            let Some(rest) = fname.strip_prefix(&format.noisy_prefix) else {
                continue;
            };
            let gt = sub.join(format!("{}{rest}", format.clean_prefix));
            if !gt.exists() {
                return Err(Error::Domain(format!(
                    "{} has no matching {}",
                    f.display(),
                    gt.display()
                )));
            }
            out.push(PairedSample::new(Image::load_png(&f)?, Image::load_png(&gt)?, params)?);
        }
    }
    Ok(out)
}

/// One line of a synthetic dataset's `meta.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub index: usize,
    pub iso: f64,
    pub shutter_speed: f64,
    pub f_number: f64,
    pub lambda_read: f64,
    pub lambda_shot: f64,
    pub seed: u64,
}

/// Write samples as 8-bit PNGs plus `meta.jsonl`.
pub fn write_synth_dir(dir: &Path, samples: &[SyntheticSample]) -> Result<()> {
    fs::create_dir_all(dir.join("clean"))?;
    fs::create_dir_all(dir.join("noisy"))?;
    let mut meta = BufWriter::new(fs::File::create(dir.join("meta.jsonl"))?);
    for s in samples {
        s.clean.save_png(&dir.join(format!("clean/{:05}.png", s.index)))?;
        s.noisy.save_png(&dir.join(format!("noisy/{:05}.png", s.index)))?;
        let NoiseParams {
            lambda_read,
            lambda_shot,
        } = s.noise;
        let line = SynthMeta {
            index: s.index,
            iso: s.params.iso,
            shutter_speed: s.params.shutter_speed,
            f_number: s.params.f_number.unwrap_or(f64::NAN),
            lambda_read,
            lambda_shot,
            seed: s.seed,
        };
        serde_json::to_writer(&mut meta, &line)?;
        meta.write_all(b"\n")?;
    }
    meta.flush()?;
    Ok(())
}

pub fn load_synth_dir(dir: &Path) -> Result<Vec<PairedSample>> {
    let path = dir.join("meta.jsonl");
    let mut out = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(&path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: SynthMeta = serde_json::from_str(&line).map_err(|e| parse_err(&path, i + 1, e.to_string()))?;
        let params = CameraParams::with_f_number(m.iso, m.shutter_speed, m.f_number);
        let noisy = Image::load_png(&dir.join(format!("noisy/{:05}.png", m.index)))?;
        let clean = Image::load_png(&dir.join(format!("clean/{:05}.png", m.index)))?;
        out.push(PairedSample::new(noisy, clean, params).map_err(|e| parse_err(&path, i + 1, e.to_string()))?);
    }
    Ok(out)
}

/// Load whichever layout `dir` holds: `meta.jsonl`, `pairs.tsv`, or scene directories.
pub fn load_dir(dir: &Path, sidd: &SiddFormat) -> Result<Vec<PairedSample>> {
    if dir.join("meta.jsonl").exists() {
        load_synth_dir(dir)
    } else if dir.join("pairs.tsv").exists() {
        load_sid_style(dir)
    } else {
        load_sidd_style(dir, sidd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{make_dataset, NoiseCalib, SampleMode, SamplerConfig};

    fn pair(h: usize, w: usize) -> PairedSample {
        let noisy = Image::from_fn(3, h, w, |c, y, x| ((c * 7 + y * 3 + x) % 255) as f32 / 255.0);
        let clean = Image::from_fn(3, h, w, |c, y, x| ((c + y + 5 * x) % 255) as f32 / 255.0);
        PairedSample::new(noisy, clean, CameraParams::with_f_number(100.0, 30.0, 2.0)).unwrap()
    }

    /// Every origin of the form `min(i·stride, len − patch)`, deduplicated.
    fn origins_oracle(len: usize, patch: usize, stride: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..=len / stride).map(|i| (i * stride).min(len - patch)).collect();
        v.dedup();
        v
    }

    #[test]
    fn crop_origin_examples() {
        assert_eq!(crop_origins(256, 256, 196).unwrap(), vec![0]);
        assert_eq!(crop_origins(512, 256, 196).unwrap(), vec![0, 196, 256]);
        assert_eq!(origins_oracle(512, 256, 196), vec![0, 196, 256]);
        for (len, p, s) in [(100, 32, 32), (100, 32, 7), (33, 32, 1), (500, 256, 180)] {
            assert_eq!(
                crop_origins(len, p, s).unwrap(),
                origins_oracle(len, p, s),
                "{len} {p} {s}"
            );
        }
        assert!(crop_origins(10, 16, 8).is_err());
        assert!(crop_origins(32, 16, 17).is_err());
    }

    #[test]
    fn crops_are_aligned_regions() {
        let s = pair(40, 52);
        let patches = crop_patches(&s, 16, 12).unwrap();
        let ys = crop_origins(40, 16, 12).unwrap();
        let xs = crop_origins(52, 16, 12).unwrap();
        assert_eq!(patches.len(), ys.len() * xs.len());
        for (k, p) in patches.iter().enumerate() {
            let (oy, ox) = (ys[k / xs.len()], xs[k % xs.len()]);
            for c in 0..3 {
                for y in 0..16 {
                    for x in 0..16 {
                        assert_eq!(p.noisy.at(c, y, x), s.noisy.at(c, oy + y, ox + x));
                        assert_eq!(p.clean.at(c, y, x), s.clean.at(c, oy + y, ox + x));
                    }
                }
            }
        }
        assert_eq!(crop_patches(&pair(512, 512), 256, 196).unwrap().len(), 9);
    }

    #[test]
    fn sid_row_parsing() {
        let p = Path::new("pairs.tsv");
        let row = parse_sid_row("n.png c.png 1600 0.1 2.8", p, 1).unwrap();
        assert_eq!(row.params.iso, 1600.0);
        assert_eq!(row.params.shutter_speed, 10.0);
        assert_eq!(row.params.f_number, Some(2.8));
        let err = parse_sid_row("n.png c.png 1600 x 2.8", p, 7).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 7, .. }), "{err}");
        assert!(parse_sid_row("n.png c.png 1600", p, 2).is_err());
        assert!(parse_sid_row("n.png c.png -5 0.1 2.8", p, 3).is_err());
    }

    #[test]
    fn sidd_name_parsing() {
        let fmt = SiddFormat {
            cameras: [("S6".to_string(), 0)].into_iter().collect(),
            ..Default::default()
        };
        let p = fmt.parse_name("0001_001_S6_00800_00350_3200_L").unwrap();
        assert_eq!(
            (p.iso, p.shutter_speed, p.device_code, p.f_number),
            (800.0, 350.0, Some(0), None)
        );
        assert!(fmt.parse_name("0001_001_XX_00800_00350_3200_L").is_err());
        assert!(fmt.parse_name("0001_S6_00800").is_err());
        let custom = SiddFormat {
            pattern: "{camera}_{iso}_{shutter}".into(),
            ..fmt
        };
        assert_eq!(custom.parse_name("S6_100_60").unwrap().shutter_speed, 60.0);
    }

    #[test]
    fn empty_dirs_load_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_sid_style(dir.path()).unwrap().is_empty());
        assert!(load_sidd_style(dir.path(), &SiddFormat::default()).unwrap().is_empty());
        assert!(load_dir(dir.path(), &SiddFormat::default()).unwrap().is_empty());
    }

    #[test]
    fn sid_dir_round_trip_and_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let s = pair(8, 8);
        s.noisy.save_png(&dir.path().join("n.png")).unwrap();
        s.clean.save_png(&dir.path().join("c.png")).unwrap();
        fs::write(
            dir.path().join("pairs.tsv"),
            "noisy_path\tclean_path\tiso\texposure_time_s\tf_number\nn.png\tc.png\t1600\t0.1\t2.8\n",
        )
        .unwrap();
        let loaded = load_sid_style(dir.path()).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].noisy, s.noisy.quantized());
        assert_eq!(loaded[0].params.shutter_speed, 10.0);
        fs::write(
            dir.path().join("pairs.tsv"),
            "n.png c.png 1600 0.1 2.8\nn.png c.png oops 0.1 2.8\n",
        )
        .unwrap();
        assert!(matches!(load_sid_style(dir.path()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn sidd_dir_loading() {
        let dir = tempfile::tempdir().unwrap();
        let scene = dir.path().join("0001_001_S6_00800_00350_3200_L");
        fs::create_dir(&scene).unwrap();
        let s = pair(8, 8);
        s.noisy.save_png(&scene.join("NOISY_SRGB_010.PNG")).unwrap();
        s.clean.save_png(&scene.join("GT_SRGB_010.PNG")).unwrap();
        let loaded = load_dir(dir.path(), &SiddFormat::default()).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].params.device_code, Some(2));
        assert_eq!(loaded[0].clean, s.clean.quantized());
    }

    #[test]
    fn synth_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = make_dataset(
            5,
            16,
            &NoiseCalib::default(),
            &SamplerConfig::default(),
            SampleMode::Correlated,
            1,
        )
        .unwrap();
        write_synth_dir(dir.path(), &data).unwrap();
        let meta = fs::read_to_string(dir.path().join("meta.jsonl")).unwrap();
        let first: serde_json::Value = serde_json::from_str(meta.lines().next().unwrap()).unwrap();
        for key in [
            "index",
            "iso",
            "shutter_speed",
            "f_number",
            "lambda_read",
            "lambda_shot",
            "seed",
        ] {
            assert!(first.get(key).is_some(), "{key}");
        }
        let loaded = load_dir(dir.path(), &SiddFormat::default()).unwrap();
        assert_eq!(loaded.len(), 5);
        for (l, d) in loaded.iter().zip(&data) {
            assert_eq!(l.noisy, d.noisy.quantized());
            assert_eq!(l.params, d.params);
        }
    }
}
