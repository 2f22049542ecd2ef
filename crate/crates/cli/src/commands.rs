//! Implementations behind the `cpad` subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use cpad_core::autodiff::gradcheck::{op_suite, GradcheckOptions, GradcheckReport};
use cpad_core::data::{load_dir, write_synth_dir, SiddFormat};
use cpad_core::eval::{evaluate, sweep, EvalReport, SweepAxis, SweepRecord};
use cpad_core::net::{checkpoint, gradcheck::network_suite};
use cpad_core::noise::{make_dataset, NoiseCalib, SampleMode, SamplerConfig};
use cpad_core::train::{train, Output, TrainResult};
use cpad_core::{encode, CameraParams, ConditionVector, CpadNet, Image, ParamRanges, RunConfig};

/// Acceptance threshold for the gradient checks.
pub const GRADCHECK_TOL: f64 = 1e-4;

pub fn read_ranges(path: &Path) -> Result<ParamRanges> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing ranges file {}", path.display()))
}

/// Encode with explicit ranges, optionally taking ranges and device embedding from a checkpoint.
pub fn encode_params(
    params: &CameraParams,
    ranges: Option<ParamRanges>,
    ckpt: Option<&Path>,
) -> Result<ConditionVector> {
    let net = ckpt.map(load_net).transpose()?;
    let ranges = ranges
        .or_else(|| net.as_ref().map(|n| n.config().ranges))
        .unwrap_or_default();
    let embedding = net.as_ref().and_then(|n| n.device_embedding());
    if params.device_code.is_some() && embedding.is_none() {
        anyhow::bail!("--device needs a checkpoint with a device embedding (--ckpt)");
    }
    Ok(encode(params, &ranges, embedding.as_ref())?)
}

pub fn synth(n: usize, patch: usize, seed: u64, mode: SampleMode, out: &Path) -> Result<()> {
    let samples = make_dataset(n, patch, &NoiseCalib::default(), &SamplerConfig::default(), mode, seed)?;
    write_synth_dir(out, &samples)?;
    Ok(())
}

pub fn gradcheck(seed: u64) -> Result<Vec<GradcheckReport>> {
    let mut reports = op_suite(seed)?;
    reports.extend(network_suite(seed, &GradcheckOptions::default())?);
    Ok(reports)
}

pub fn gradcheck_table(reports: &[GradcheckReport]) -> String {
    let mut s = format!(
        "{:<28} {:>8} {:>12} {:>12}  status\n",
        "check", "entries", "max_abs", "max_rel"
    );
    for r in reports {
        let checked: usize = r.inputs.iter().map(|i| i.checked).sum();
        let status = if r.passed(GRADCHECK_TOL) { "ok" } else { "FAIL" };
        let _ = writeln!(
            s,
            "{:<28} {:>8} {:>12.3e} {:>12.3e}  {status}",
            r.name,
            checked,
            r.max_abs_err(),
            r.max_rel_err()
        );
    }
    s
}

pub fn read_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

pub fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path, baseline: bool) -> Result<TrainResult> {
    let model = cfg.model.clone().with_conditioned(!baseline && cfg.model.conditioned);
    let samples = load_dir(data, &SiddFormat::default()).with_context(|| format!("loading {}", data.display()))?;
    ensure!(!samples.is_empty(), "no samples found in {}", data.display());
    fs::create_dir_all(out)?;
    tracing::info!(samples = samples.len(), conditioned = model.conditioned, "training");
    Ok(train(&cfg.train, &model, &samples, Some(Output { dir: out }))?)
}

pub fn load_net(ckpt: &Path) -> Result<CpadNet<f32>> {
    let (net, _) = checkpoint::load::<f32>(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    Ok(net)
}

pub fn eval_cmd(ckpt: &Path, data: &Path, sweep_grid: Option<&[f64]>) -> Result<EvalReport> {
    let net = load_net(ckpt)?;
    let samples = load_dir(data, &SiddFormat::default()).with_context(|| format!("loading {}", data.display()))?;
    ensure!(!samples.is_empty(), "no samples found in {}", data.display());
    Ok(evaluate(&net, &samples, sweep_grid)?)
}

/// Sweep one axis and write `step_XX.png` plus `records.json` into `out`.
pub fn sweep_cmd(
    ckpt: &Path,
    image: &Path,
    clean: Option<&Path>,
    base: &CameraParams,
    axis: SweepAxis,
    grid: &[f64],
    out: &Path,
) -> Result<Vec<SweepRecord>> {
    ensure!(!grid.is_empty(), "empty sweep grid");
    let net = load_net(ckpt)?;
    let noisy = Image::load_png(image).with_context(|| format!("loading {}", image.display()))?;
    let clean = clean.map(Image::load_png).transpose()?;
    let steps = sweep(&net, &noisy, clean.as_ref(), base, axis, grid)?;
    fs::create_dir_all(out)?;
    let mut records = Vec::with_capacity(steps.len());
    for (i, step) in steps.into_iter().enumerate() {
        step.output.save_png(&out.join(format!("step_{i:02}.png")))?;
        records.push(step.record);
    }
    fs::write(out.join("records.json"), serde_json::to_vec_pretty(&records)?)?;
    Ok(records)
}

pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad grid value {t:?}")))
        .collect()
}
