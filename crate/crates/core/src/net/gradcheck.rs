//! Finite-difference checks of the conditioning path, one block and whole networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{gradcheck, spread_channels, GradcheckOptions, GradcheckReport};
use crate::autodiff::{Tape, Tensor, Var};
use crate::camera::{CameraParams, COND_DIM};
use crate::error::Result;
use crate::net::{adaln, Cond, CpadNet, Mode, ModelConfig};

/// Tiny network used by the checks: width 4, one block per level.
pub fn tiny_config(conditioned: bool) -> ModelConfig {
    ModelConfig {
        width: 4,
        enc_blocks: [1, 1, 1],
        bottom_blocks: 1,
        dec_blocks: [1, 1, 1],
        n_devices: 2,
        ..ModelConfig::desk().with_conditioned(conditioned)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Tiny network with every weight moved off its initial value, so that no
/// gradient is trivially zero.
fn live_net(conditioned: bool, seed: u64) -> Result<CpadNet<f64>> {
    let mut net = CpadNet::new(tiny_config(conditioned), seed)?;
    net.perturb(0.1, seed ^ 0x5eed);
    Ok(net)
}

fn adaln_check(seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, hidden) = (4, 6);
    let inputs = vec![
        spread_channels(&mut rng, &[2, c, 4, 4]),
        uniform(&mut rng, &[2, COND_DIM], 0.0, 1.0),
        uniform(&mut rng, &[hidden, COND_DIM], -0.5, 0.5),
        uniform(&mut rng, &[hidden], -0.5, 0.5),
        uniform(&mut rng, &[4 * c, hidden], -0.5, 0.5),
        uniform(&mut rng, &[4 * c], -0.5, 0.5),
    ];
    gradcheck("adaln", &inputs, opts, |t, v| {
        let a = adaln(t, v[0], v[1], [v[2], v[3], v[4], v[5]], 0, 0.2, true, seed)?;
        let b = adaln(t, v[0], v[1], [v[2], v[3], v[4], v[5]], 1, 0.2, true, seed)?;
        t.add(a, b)
    })
}

fn block_check(seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = live_net(true, seed)?;
    let (idx, c) = net.block_params(0).expect("tiny net has blocks");
    let mut inputs = vec![
        uniform(&mut rng, &[1, c, 8, 8], -1.0, 1.0),
        uniform(&mut rng, &[1, COND_DIM], 0.0, 1.0),
    ];
    inputs.extend(idx.iter().map(|&i| net.params()[i].clone()));
    gradcheck("cpa_nafblock", &inputs, opts, |t, v| {
        let pv = bind(t, &net, &idx, &v[2..]);
        net.block_forward(t, &pv, 0, v[0], Some(v[1]), Mode::train(seed))
    })
}

/// Parameter vars for `net` where `idx[k]` is bound to `vars[k]` and every other
/// parameter is a constant.
fn bind(tape: &mut Tape<f64>, net: &CpadNet<f64>, idx: &[usize], vars: &[Var]) -> Vec<Var> {
    let mut pv: Vec<Option<Var>> = vec![None; net.params().len()];
    for (&i, &v) in idx.iter().zip(vars) {
        pv[i] = Some(v);
    }
    pv.into_iter()
        .enumerate()
        .map(|(i, v)| v.unwrap_or_else(|| tape.constant(net.params()[i].clone())))
        .collect()
}

fn network_check(conditioned: bool, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = live_net(conditioned, seed)?;
    let cams = [
        CameraParams::with_f_number(800.0, 60.0, 2.8),
        CameraParams::with_device(3200.0, 100.0, 1),
    ];
    let mut inputs = vec![uniform(&mut rng, &[2, 3, 8, 8], 0.0, 1.0)];
    let mut devices = Vec::new();
    if conditioned {
        let (v, d) = net.condition_batch(&cams)?;
        inputs.push(v);
        devices = d;
    }
    let first_param = inputs.len();
    inputs.extend(net.params().iter().cloned());
    let name = if conditioned { "cpadnet" } else { "baseline" };
    gradcheck(name, &inputs, opts, |t, vs| {
        let cond = conditioned.then_some(Cond {
            vector: vs[1],
            devices: &devices,
        });
        net.forward(t, &vs[first_param..], vs[0], cond, Mode::train(seed))
    })
}

/// Gradient checks of adaLN, a single block and the tiny conditioned and baseline
/// networks, in double precision with central differences.
pub fn network_suite(seed: u64, opts: &GradcheckOptions) -> Result<Vec<GradcheckReport>> {
    Ok(vec![
        adaln_check(seed, opts)?,
        block_check(seed, opts)?,
        network_check(true, seed, opts)?,
        network_check(false, seed, opts)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conditioning_and_block_gradients() {
        let opts = GradcheckOptions::default();
        for r in [adaln_check(0, &opts).unwrap(), block_check(0, &opts).unwrap()] {
            assert!(r.passed(1e-4), "{}: {:?}", r.name, r.inputs);
        }
    }

    #[test]
    fn sampled_network_gradients() {
        let opts = GradcheckOptions {
            max_entries: Some(6),
            ..Default::default()
        };
        for conditioned in [true, false] {
            let r = network_check(conditioned, 1, &opts).unwrap();
            assert!(r.passed(1e-4), "{}: {:?}", r.name, r.inputs);
        }
    }
}
