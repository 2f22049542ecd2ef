//! Camera parameter encoding.
//!
//! Each of ISO, shutter speed and F-number is expanded through nine fixed
//! non-linear functions, normalized into `[0, 1]` against a configured range, and
//! the three 9-blocks are concatenated into the 27-dimensional condition vector.
//! Fixed-aperture devices without an F-number replace the third block with a
//! learned per-device embedding squashed by a logistic map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of equalization functions per parameter.
pub const BLOCK_DIM: usize = 9;
/// Length of the condition vector.
pub const COND_DIM: usize = 3 * BLOCK_DIM;

/// Physical camera settings of one capture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub iso: f64,
    /// Reciprocal of the exposure time, in s⁻¹.
    pub shutter_speed: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_number: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_code: Option<usize>,
}

impl CameraParams {
    pub fn with_f_number(iso: f64, shutter_speed: f64, f_number: f64) -> Self {
        Self {
            iso,
            shutter_speed,
            f_number: Some(f_number),
            device_code: None,
        }
    }

    pub fn with_device(iso: f64, shutter_speed: f64, device_code: usize) -> Self {
        Self {
            iso,
            shutter_speed,
            f_number: None,
            device_code: Some(device_code),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidParams(format!("{name} must be positive, got {v}")))
            }
        };
        positive("iso", self.iso)?;
        positive("shutter_speed", self.shutter_speed)?;
        match (self.f_number, self.device_code) {
            (Some(f), None) => positive("f_number", f),
            (None, Some(_)) => Ok(()),
            _ => Err(Error::InvalidParams(
                "exactly one of f_number and device_code must be set".into(),
            )),
        }
    }

    /// Exposure time in seconds.
    pub fn exposure_time(&self) -> f64 {
        1.0 / self.shutter_speed
    }
}

/// Normalization domain of one parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct ParamRange {
    lo: f64,
    hi: f64,
}

impl ParamRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_finite() && hi.is_finite() && 0.0 < lo && lo < hi {
            Ok(Self { lo, hi })
        } else {
            Err(Error::Domain(format!("invalid range [{lo}, {hi}]: need 0 < lo < hi")))
        }
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn clamp(&self, p: f64) -> f64 {
        p.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, p: f64) -> bool {
        (self.lo..=self.hi).contains(&p)
    }
}

impl TryFrom<[f64; 2]> for ParamRange {
    type Error = Error;

    fn try_from(v: [f64; 2]) -> Result<Self> {
        Self::new(v[0], v[1])
    }
}

impl From<ParamRange> for [f64; 2] {
    fn from(r: ParamRange) -> Self {
        [r.lo, r.hi]
    }
}

/// Per-parameter normalization ranges. Matches the ranges JSON file
/// `{"iso":[lo,hi],"shutter":[lo,hi],"fnum":[lo,hi]}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    #[serde(default)]
    pub iso: Option<ParamRange>,
    #[serde(default)]
    pub shutter: Option<ParamRange>,
    #[serde(default)]
    pub fnum: Option<ParamRange>,
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            iso: Some(ParamRange { lo: 50.0, hi: 25600.0 }),
            shutter: Some(ParamRange { lo: 0.1, hi: 8000.0 }),
            fnum: Some(ParamRange { lo: 1.0, hi: 22.0 }),
        }
    }
}

/// The 27-dimensional condition vector `[ISO | shutter | F-number-or-device]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ConditionVector([f64; COND_DIM]);

impl ConditionVector {
    pub fn values(&self) -> &[f64; COND_DIM] {
        &self.0
    }

    pub fn iso_block(&self) -> &[f64] {
        &self.0[..BLOCK_DIM]
    }

    pub fn shutter_block(&self) -> &[f64] {
        &self.0[BLOCK_DIM..2 * BLOCK_DIM]
    }

    pub fn third_block(&self) -> &[f64] {
        &self.0[2 * BLOCK_DIM..]
    }
}

impl TryFrom<Vec<f64>> for ConditionVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        let arr: [f64; COND_DIM] = v.try_into().map_err(|v: Vec<f64>| {
            Error::Domain(format!("condition vector needs {COND_DIM} values, got {}", v.len()))
        })?;
        if arr.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Domain("condition vector components must lie in [0,1]".into()));
        }
        Ok(Self(arr))
    }
}

impl From<ConditionVector> for Vec<f64> {
    fn from(v: ConditionVector) -> Self {
        v.0.to_vec()
    }
}

/// Embedding table `n_devices × 9` for devices without an F-number.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceEmbedding {
    weights: Vec<f64>,
    n_devices: usize,
}

impl DeviceEmbedding {
    pub fn new(n_devices: usize, weights: Vec<f64>) -> Result<Self> {
        if n_devices == 0 || weights.len() != n_devices * BLOCK_DIM {
            return Err(Error::Domain(format!(
                "embedding needs {n_devices}×{BLOCK_DIM} weights, got {}",
                weights.len()
            )));
        }
        Ok(Self { weights, n_devices })
    }

    pub fn n_devices(&self) -> usize {
        self.n_devices
    }

    pub fn row(&self, code: usize) -> Result<&[f64]> {
        if code >= self.n_devices {
            return Err(Error::DeviceOutOfRange {
                code,
                n_devices: self.n_devices,
            });
        }
        Ok(&self.weights[code * BLOCK_DIM..(code + 1) * BLOCK_DIM])
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Which equalization functions rise (`Some(true)`), fall (`Some(false)`) or
/// oscillate (`None`) with the parameter, in component order.
pub const COMPONENT_TREND: [Option<bool>; BLOCK_DIM] = [
    Some(true),
    Some(false),
    Some(true),
    Some(false),
    Some(true),
    Some(false),
    Some(true),
    None,
    None,
];

fn monotone_fns(x: f64) -> [f64; 7] {
    [
        x,
        1.0 / x,
        x.sqrt(),
        1.0 / x.sqrt(),
        x.powf(0.25),
        x.powf(-0.25),
        x.ln(),
    ]
}

/// Nine normalized equalization features of one parameter value.
pub fn equalize(p: f64, range: &ParamRange) -> Result<[f64; BLOCK_DIM]> {
    if !(p.is_finite() && p > 0.0) {
        return Err(Error::Domain(format!("parameter must be positive, got {p}")));
    }
    let x = range.clamp(p);
    let (at_x, at_lo, at_hi) = (monotone_fns(x), monotone_fns(range.lo), monotone_fns(range.hi));
    let mut out = [0.0; BLOCK_DIM];
    for i in 0..7 {
        let (a, b) = (at_lo[i].min(at_hi[i]), at_lo[i].max(at_hi[i]));
        out[i] = ((at_x[i] - a) / (b - a)).clamp(0.0, 1.0);
    }
    let l = x.ln();
    out[7] = (l.sin() + 1.0) / 2.0;
    out[8] = (l.cos() + 1.0) / 2.0;
    Ok(out)
}

/// Build the condition vector for `params`.
///
/// The third block is the equalized F-number, or, for a device code, the
/// logistic of that device's embedding row.
pub fn encode(
    params: &CameraParams,
    ranges: &ParamRanges,
    embedding: Option<&DeviceEmbedding>,
) -> Result<ConditionVector> {
    params.validate()?;
    let iso_r = ranges.iso.ok_or(Error::MissingRange("iso"))?;
    let ss_r = ranges.shutter.ok_or(Error::MissingRange("shutter"))?;
    let mut v = [0.0; COND_DIM];
    v[..BLOCK_DIM].copy_from_slice(&equalize(params.iso, &iso_r)?);
    v[BLOCK_DIM..2 * BLOCK_DIM].copy_from_slice(&equalize(params.shutter_speed, &ss_r)?);
    let third = &mut v[2 * BLOCK_DIM..];
    match (params.f_number, params.device_code) {
        (Some(f), _) => {
            let r = ranges.fnum.ok_or(Error::MissingRange("fnum"))?;
            third.copy_from_slice(&equalize(f, &r)?);
        }
        (None, Some(code)) => {
            let emb = embedding
                .ok_or_else(|| Error::InvalidParams("device_code given but no device embedding configured".into()))?;
            for (o, &w) in third.iter_mut().zip(emb.row(code)?) {
                *o = logistic(w);
            }
        }
        (None, None) => unreachable!("validated above"),
    }
    Ok(ConditionVector(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iso_range() -> ParamRange {
        ParamRange::new(50.0, 25600.0).unwrap()
    }

    #[test]
    fn endpoints_of_monotone_components() {
        let r = iso_range();
        let lo = equalize(r.lo(), &r).unwrap();
        let hi = equalize(r.hi(), &r).unwrap();
        assert_eq!((lo[0], lo[1]), (0.0, 1.0));
        assert_eq!((hi[0], hi[1]), (1.0, 0.0));
        for i in 0..7 {
            let rising = COMPONENT_TREND[i] == Some(true);
            assert_eq!(lo[i], if rising { 0.0 } else { 1.0 }, "component {i}");
            assert_eq!(hi[i], if rising { 1.0 } else { 0.0 }, "component {i}");
        }
    }

    #[test]
    fn iso_400_reference_values() {
        // (400-50)/(25600-50) and (√400-√50)/(√25600-√50), evaluated by hand
        let v = equalize(400.0, &iso_range()).unwrap();
        assert!((v[0] - 0.013_698_630_136_986_3).abs() < 1e-12);
        assert!((v[2] - 0.084_542_094_181_559).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(equalize(0.0, &iso_range()).is_err());
        assert!(equalize(-3.0, &iso_range()).is_err());
        assert!(ParamRange::new(5.0, 5.0).is_err());
        assert!(ParamRange::new(0.0, 5.0).is_err());
    }

    #[test]
    fn out_of_range_inputs_are_clamped() {
        let r = iso_range();
        assert_eq!(equalize(1.0, &r).unwrap(), equalize(50.0, &r).unwrap());
        assert_eq!(equalize(1e9, &r).unwrap(), equalize(25600.0, &r).unwrap());
    }

    #[test]
    fn encode_lower_endpoints_and_layout() {
        let ranges = ParamRanges::default();
        let p = CameraParams::with_f_number(50.0, 0.1, 1.0);
        let v = encode(&p, &ranges, None).unwrap();
        assert_eq!((v.values()[0], v.values()[9], v.values()[18]), (0.0, 0.0, 0.0));

        let p = CameraParams::with_f_number(400.0, 30.0, 2.0);
        let v = encode(&p, &ranges, None).unwrap();
        assert_eq!(v.iso_block(), &equalize(400.0, &ranges.iso.unwrap()).unwrap());
        assert_eq!(v.shutter_block(), &equalize(30.0, &ranges.shutter.unwrap()).unwrap());
        assert_eq!(v.third_block(), &equalize(2.0, &ranges.fnum.unwrap()).unwrap());
    }

    #[test]
    fn encode_device_block_is_logistic_of_embedding_row() {
        let weights: Vec<f64> = (0..5 * BLOCK_DIM).map(|i| (i as f64 - 20.0) * 0.7).collect();
        let emb = DeviceEmbedding::new(5, weights).unwrap();
        let p = CameraParams::with_device(800.0, 100.0, 2);
        let v = encode(&p, &ParamRanges::default(), Some(&emb)).unwrap();
        for (o, &w) in v.third_block().iter().zip(emb.row(2).unwrap()) {
            assert_eq!(*o, logistic(w));
            assert!((0.0..=1.0).contains(o));
        }
    }

    #[test]
    fn encode_errors() {
        let emb = DeviceEmbedding::new(5, vec![0.0; 45]).unwrap();
        let p = CameraParams::with_device(800.0, 100.0, 7);
        assert!(matches!(
            encode(&p, &ParamRanges::default(), Some(&emb)),
            Err(Error::DeviceOutOfRange { code: 7, .. })
        ));
        let ranges = ParamRanges {
            fnum: None,
            ..ParamRanges::default()
        };
        let p = CameraParams::with_f_number(100.0, 30.0, 2.0);
        assert!(matches!(encode(&p, &ranges, None), Err(Error::MissingRange("fnum"))));
        let both = CameraParams {
            device_code: Some(1),
            ..p
        };
        assert!(encode(&both, &ParamRanges::default(), Some(&emb)).is_err());
    }

    #[test]
    fn ranges_json_round_trip() {
        let r: ParamRanges = serde_json::from_str(r#"{"iso":[100,6400],"shutter":[1,1000],"fnum":[1.4,16]}"#).unwrap();
        assert_eq!(r.iso.unwrap().hi(), 6400.0);
        assert!(serde_json::from_str::<ParamRanges>(r#"{"iso":[10,1]}"#).is_err());
    }

    proptest! {
        #[test]
        fn components_bounded(iso in 1e-3f64..1e6, ss in 1e-4f64..1e5, f in 0.1f64..100.0) {
            let v = encode(&CameraParams::with_f_number(iso, ss, f), &ParamRanges::default(), None).unwrap();
            prop_assert!(v.values().iter().all(|x| (0.0..=1.0).contains(x)));
        }

        #[test]
        fn monotone_components(a in 50f64..25600.0, b in 50f64..25600.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (va, vb) = (equalize(lo, &iso_range()).unwrap(), equalize(hi, &iso_range()).unwrap());
            for i in 0..BLOCK_DIM {
                match COMPONENT_TREND[i] {
                    Some(true) => prop_assert!(va[i] <= vb[i]),
                    Some(false) => prop_assert!(va[i] >= vb[i]),
                    None => {}
                }
            }
        }

        #[test]
        fn deterministic(iso in 50f64..25600.0) {
            let p = CameraParams::with_f_number(iso, 60.0, 4.0);
            let a = encode(&p, &ParamRanges::default(), None).unwrap();
            let b = encode(&p, &ParamRanges::default(), None).unwrap();
            prop_assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
