use std::f64::consts::PI;

use crate::autodiff::{Real, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update. `grads[i]` of `None` is treated as a zero gradient.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Option<&[T]>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return shape_err(
            "adam_step",
            format!(
                "{} params, {} grads, {} state slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        );
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let step_size = T::of(lr / bc1);
    let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
    let eps = T::of(cfg.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if m.len() != p.len() {
            return shape_err("adam_step", format!("state slot {i} length mismatch"));
        }
        match grads[i] {
            Some(g) => {
                if g.len() != p.len() {
                    return shape_err("adam_step", format!("gradient {i} length mismatch"));
                }
                for (((w, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                    *mi = b1 * *mi + one_b1 * gi;
                    *vi = b2 * *vi + one_b2 * gi * gi;
                    *w -= step_size * *mi / ((*vi).sqrt() * inv_sqrt_bc2 + eps);
                }
            }
            None => {
                for ((w, mi), vi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = b1 * *mi;
                    *vi = b2 * *vi;
                    *w -= step_size * *mi / ((*vi).sqrt() * inv_sqrt_bc2 + eps);
                }
            }
        }
    }
    Ok(())
}

/// Cosine annealing from `lr0` at `t = 0` to `lr_min` at `t = total`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = t.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let mut params = vec![Tensor::<f64>::from_fn(&[3], |i| i as f64 - 1.0)];
        let before = params.clone();
        let mut st = AdamState::new(&params);
        let zeros = vec![0.0; 3];
        adam_step(&mut params, &[Some(&zeros)], &mut st, 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn unit_gradient_first_step_moves_by_lr() {
        let mut params = vec![Tensor::<f64>::scalar(0.5)];
        let mut st = AdamState::new(&params);
        let g = [1.0];
        adam_step(&mut params, &[Some(&g)], &mut st, 1e-3, &AdamConfig::default()).unwrap();
        // m̂ = v̂ = 1, so Δ = -lr / (1 + eps)
        let expected = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((params[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_runs_have_identical_trajectories() {
        let run = || {
            let mut p = vec![Tensor::<f32>::from_fn(&[4], |i| i as f32)];
            let mut st = AdamState::new(&p);
            let mut traj = Vec::new();
            for k in 0..50 {
                let g: Vec<f32> = (0..4).map(|i| ((k * 7 + i) as f32).sin()).collect();
                adam_step(&mut p, &[Some(&g)], &mut st, 1e-2, &AdamConfig::default()).unwrap();
                traj.extend_from_slice(p[0].data());
            }
            traj
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        let total = 200_000;
        assert_eq!(cosine_lr(0, total, 2e-4, 1e-6), 2e-4);
        assert!((cosine_lr(total, total, 2e-4, 1e-6) - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(total / 2, total, 2e-4, 1e-6) - 1.005e-4).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_is_nonincreasing() {
        let total = 1000;
        let lrs: Vec<f64> = (0..=total).map(|t| cosine_lr(t, total, 2e-4, 1e-6)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
