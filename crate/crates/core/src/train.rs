//! L1 training with Adam and cosine learning-rate decay.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, cosine_lr, AdamConfig, AdamState, Tape};
use crate::data::{crop_patches, PairedSample};
use crate::error::{Error, Result};
use crate::eval::denoise_image;
use crate::image::{batch_tensor, Image};
use crate::metrics::psnr;
use crate::net::checkpoint;
use crate::net::{Cond, CpadNet, Mode, ModelConfig};
use crate::noise::mix_seed;
use crate::stats::mean;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub patch: usize,
    pub stride: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub seed: u64,
    /// Fraction of (shuffled) samples held out for validation.
    pub val_fraction: f64,
    /// Validate every this many iterations (and after the last); 0 validates only at the end.
    pub val_every: usize,
    /// At most this many held-out images are scored during training.
    pub val_max: usize,
    /// Write a checkpoint every this many iterations (and after the last); 0 writes only the last.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            iters: 3000,
            batch: 8,
            patch: 32,
            stride: 32,
            lr0: 2e-4,
            lr_min: 1e-6,
            seed: 0,
            val_fraction: 0.1,
            val_every: 500,
            val_max: 64,
            checkpoint_every: 1000,
        }
    }

    /// Full schedule; `stride` is 196 for SID-style and 180 for SIDD-style data.
    pub fn full() -> Self {
        Self {
            iters: 200_000,
            patch: 256,
            stride: 196,
            val_every: 5000,
            checkpoint_every: 10_000,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown training preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.patch == 0 || self.stride == 0 {
            return Err(Error::Config("batch, patch and stride must be positive".into()));
        }
        if self.stride > self.patch {
            return Err(Error::Config(format!(
                "stride {} exceeds patch {}",
                self.stride, self.patch
            )));
        }
        if !(self.lr0 > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr0) {
            return Err(Error::Config(format!(
                "need 0 ≤ lr_min ≤ lr0, got {} and {}",
                self.lr_min, self.lr0
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction {} outside [0,1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Model and training settings as stored in a config file:
/// `{"model": {...}, "train": {...}}`, each section optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_psnr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub net: CpadNet<f32>,
    pub log: Vec<LogRecord>,
    /// Held-out samples, in split order.
    pub validation: Vec<PairedSample>,
}

/// Deterministic split: shuffle with `seed`, hold out the last `fraction` (at least one
/// sample when there are two or more).
pub fn split_validation(samples: &[PairedSample], fraction: f64, seed: u64) -> (Vec<PairedSample>, Vec<PairedSample>) {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xDA7A)));
    let mut n_val = (samples.len() as f64 * fraction).round() as usize;
    if fraction > 0.0 && n_val == 0 && samples.len() >= 2 {
        n_val = 1;
    }
    let cut = samples.len() - n_val;
    let pick = |r: &[usize]| r.iter().map(|&i| samples[i].clone()).collect();
    (pick(&idx[..cut]), pick(&idx[cut..]))
}

/// Mean PSNR of the network's output over `samples`.
pub fn validation_psnr(net: &CpadNet<f32>, samples: &[PairedSample]) -> Result<f64> {
    let scores = samples
        .iter()
        .map(|s| psnr(&denoise_image(net, &s.noisy, &s.params)?, &s.clean))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&scores))
}

fn flip(img: &Image, h: bool, v: bool) -> Image {
    match (h, v) {
        (false, false) => img.clone(),
        (true, false) => img.flipped_horizontal(),
        (false, true) => img.flipped_vertical(),
        (true, true) => img.flipped_horizontal().flipped_vertical(),
    }
}

/// Where training writes its artifacts.
pub struct Output<'a> {
    pub dir: &'a Path,
}

impl Output<'_> {
    fn checkpoint(&self, net: &CpadNet<f32>, iter: usize, cfg: &TrainConfig, last: bool) -> Result<()> {
        let meta = serde_json::json!({ "iter": iter, "train": cfg });
        checkpoint::save(&self.dir.join(format!("ckpt_{iter:06}.cpad")), net, meta.clone())?;
        if last {
            checkpoint::save(&self.dir.join("final.cpad"), net, meta)?;
        }
        Ok(())
    }
}

/// Train a fresh network on `samples`. With `out`, writes `metrics.jsonl` and
/// checkpoints into that directory.
pub fn train(
    cfg: &TrainConfig,
    model: &ModelConfig,
    samples: &[PairedSample],
    out: Option<Output<'_>>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Domain("training needs a nonempty dataset".into()));
    }
    let (train_set, validation) = split_validation(samples, cfg.val_fraction, cfg.seed);
    let val_subset = &validation[..validation.len().min(cfg.val_max)];
    let mut patches = Vec::new();
    for s in &train_set {
        patches.extend(crop_patches(s, cfg.patch, cfg.stride)?);
    }
    if patches.is_empty() {
        return Err(Error::Domain("no training patches after the validation split".into()));
    }

    let mut net = CpadNet::<f32>::new(model.clone(), mix_seed(cfg.seed, 1))?;
    let mut adam = AdamState::new(net.params());
    let adam_cfg = AdamConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 2));
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.iters);

    let mut metrics = match &out {
        Some(o) => {
            fs::create_dir_all(o.dir)?;
            Some(BufWriter::new(fs::File::create(o.dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    if cfg.iters == 0 {
        if let Some(o) = &out {
            o.checkpoint(&net, 0, cfg, true)?;
        }
    }

    for it in 0..cfg.iters {
        let lr = cosine_lr(it, cfg.iters, cfg.lr0, cfg.lr_min);
        let mut noisy = Vec::with_capacity(cfg.batch);
        let mut clean = Vec::with_capacity(cfg.batch);
        let mut cams = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            if order.is_empty() {
                order = (0..patches.len()).collect();
                order.shuffle(&mut rng);
            }
            let p = &patches[order.pop().expect("refilled above")];
            let (h, v) = (rng.random::<bool>(), rng.random::<bool>());
            noisy.push(flip(&p.noisy, h, v));
            clean.push(flip(&p.clean, h, v));
            cams.push(p.params);
        }

        let mut tape = Tape::new();
        let pv = net.register(&mut tape, true);
        let x = tape.constant(batch_tensor(&noisy.iter().collect::<Vec<_>>())?);
        let target = tape.constant(batch_tensor(&clean.iter().collect::<Vec<_>>())?);
        let devices;
        let cond = if model.conditioned {
            let (v, d) = net.condition_batch(&cams)?;
            devices = d;
            Some(Cond {
                vector: tape.constant(v),
                devices: &devices,
            })
        } else {
            None
        };
        let y = net.forward(
            &mut tape,
            &pv,
            x,
            cond,
            Mode::train(mix_seed(cfg.seed, 1000 + it as u64)),
        )?;
        let loss_var = tape.l1_loss(y, target)?;
        let loss = tape.value(loss_var).data()[0] as f64;
        if !loss.is_finite() {
            let recent = log.iter().rev().take(10).rev().map(|r: &LogRecord| r.loss).collect();
            return Err(Error::NonFiniteLoss {
                iter: it,
                lr,
                loss,
                recent,
            });
        }
        let grads = tape.backward(loss_var)?;
        let g: Vec<Option<&[f32]>> = pv.iter().map(|&v| grads.get(v)).collect();
        adam_step(net.params_mut(), &g, &mut adam, lr, &adam_cfg)?;
        drop(tape);

        let done = it + 1;
        let last = done == cfg.iters;
        let validate = !val_subset.is_empty() && (last || (cfg.val_every > 0 && done % cfg.val_every == 0));
        let record = LogRecord {
            iter: done,
            lr,
            loss,
            val_psnr: if validate {
                Some(validation_psnr(&net, val_subset)?)
            } else {
                None
            },
        };
        if let Some(w) = metrics.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        log.push(record);
        if let Some(o) = &out {
            if last || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
                o.checkpoint(&net, done, cfg, last)?;
            }
        }
    }
    if let Some(w) = metrics.as_mut() {
        w.flush()?;
    }
    Ok(TrainResult { net, log, validation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::gradcheck::tiny_config;
    use crate::noise::{make_dataset, NoiseCalib, SampleMode, SamplerConfig};

    fn data(n: usize, size: usize) -> Vec<PairedSample> {
        make_dataset(
            n,
            size,
            &NoiseCalib::default(),
            &SamplerConfig::default(),
            SampleMode::Correlated,
            5,
        )
        .unwrap()
        .into_iter()
        .map(Into::into)
        .collect()
    }

    fn quick(iters: usize) -> TrainConfig {
        TrainConfig {
            iters,
            batch: 4,
            patch: 16,
            stride: 16,
            val_every: 0,
            checkpoint_every: 0,
            lr0: 1e-3,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn split_is_deterministic_tail() {
        let d = data(20, 8);
        let (a, b) = split_validation(&d, 0.1, 3);
        assert_eq!((a.len(), b.len()), (18, 2));
        assert_eq!(split_validation(&d, 0.1, 3).1, b);
        assert_eq!(split_validation(&d[..2], 0.1, 3).1.len(), 1);
    }

    #[test]
    fn zero_iterations_keep_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let r = train(
            &quick(0),
            &tiny_config(true),
            &data(4, 16),
            Some(Output { dir: dir.path() }),
        )
        .unwrap();
        assert!(r.log.is_empty());
        let init = CpadNet::<f32>::new(tiny_config(true), mix_seed(0, 1)).unwrap();
        assert_eq!(r.net.params(), init.params());
        let (saved, _) = checkpoint::load::<f32>(&dir.path().join("final.cpad")).unwrap();
        assert_eq!(saved.params(), init.params());
    }

    #[test]
    fn first_loss_is_noise_magnitude() {
        // identity at init: the first loss is mean |noisy − clean| of the first batch
        let d = data(10, 16);
        let r = train(&quick(1), &tiny_config(true), &d, None).unwrap();
        let (train_set, _) = split_validation(&d, 0.1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(0, 2));
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for _ in 0..4 {
            let s = &train_set[order.pop().unwrap()];
            let _flips = (rng.random::<bool>(), rng.random::<bool>());
            total += s
                .noisy
                .data()
                .iter()
                .zip(s.clean.data())
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>();
        }
        let expected = total / (4.0 * 3.0 * 16.0 * 16.0);
        assert!(
            (r.log[0].loss - expected).abs() < 1e-6,
            "{} vs {expected}",
            r.log[0].loss
        );
    }

    #[test]
    fn short_run_reduces_loss_and_is_reproducible() {
        let d = data(24, 16);
        let cfg = quick(200);
        let a = train(&cfg, &tiny_config(true), &d, None).unwrap();
        let head = mean(&a.log[..20].iter().map(|r| r.loss).collect::<Vec<_>>());
        let tail = mean(&a.log[180..].iter().map(|r| r.loss).collect::<Vec<_>>());
        assert!(tail < head, "{tail} !< {head}");
        let b = train(&cfg, &tiny_config(true), &d, None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.net.params(), b.net.params());
    }

    #[test]
    fn writes_metrics_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            val_every: 2,
            checkpoint_every: 2,
            ..quick(4)
        };
        let r = train(
            &cfg,
            &tiny_config(false),
            &data(12, 16),
            Some(Output { dir: dir.path() }),
        )
        .unwrap();
        let lines: Vec<serde_json::Value> = fs::read_to_string(dir.path().join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1]["val_psnr"].is_number() && lines[0].get("val_psnr").is_none());
        for k in ["iter", "lr", "loss"] {
            assert!(lines[0][k].is_number());
        }
        for f in ["ckpt_000002.cpad", "ckpt_000004.cpad", "final.cpad"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let (saved, _) = checkpoint::load::<f32>(&dir.path().join("final.cpad")).unwrap();
        assert_eq!(saved.params(), r.net.params());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(train(&quick(1), &tiny_config(true), &[], None).is_err());
        let bad = TrainConfig { stride: 32, ..quick(1) };
        assert!(matches!(
            train(&bad, &tiny_config(true), &data(4, 16), None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn diverging_run_reports_non_finite_loss() {
        let cfg = TrainConfig {
            lr0: 1e30,
            lr_min: 1e30,
            ..quick(50)
        };
        match train(&cfg, &tiny_config(true), &data(8, 16), None) {
            Err(Error::NonFiniteLoss { iter, recent, .. }) => assert!(iter > 0 && !recent.is_empty()),
            other => panic!("expected NonFiniteLoss, got {:?}", other.map(|r| r.log.len())),
        }
    }
}
