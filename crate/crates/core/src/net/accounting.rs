//! Closed-form parameter and multiply-accumulate counts.
//!
//! MACs cover convolutions and linear layers only; norms, activations, gating,
//! pooling and pixel shuffles are free.

use serde::Serialize;

use crate::net::config::{ModelConfig, LEVELS};

/// Parameters of a dense `k×k` convolution.
pub fn conv_params(cin: usize, cout: usize, k: usize, bias: bool) -> usize {
    cin * cout * k * k + if bias { cout } else { 0 }
}

/// MACs of a dense `k×k` convolution producing an `h_out × w_out` map.
pub fn conv_macs(cin: usize, cout: usize, k: usize, h_out: usize, w_out: usize) -> usize {
    cin * cout * k * k * h_out * w_out
}

fn block_params(cfg: &ModelConfig, c: usize) -> usize {
    let norm = if cfg.conditioned {
        let hidden = cfg.mlp_hidden(c);
        cfg.cond_dim * hidden + hidden + hidden * 4 * c + 4 * c
    } else {
        4 * c
    };
    norm + conv_params(c, 2 * c, 1, true)
        + (2 * c * 9 + 2 * c)
        + conv_params(c, c, 1, true)
        + conv_params(c, c, 1, true)
        + conv_params(c, 2 * c, 1, true)
        + conv_params(c, c, 1, true)
        + 2 * c
}

fn block_macs(cfg: &ModelConfig, c: usize, h: usize, w: usize) -> usize {
    let mlp = if cfg.conditioned {
        let hidden = cfg.mlp_hidden(c);
        cfg.cond_dim * hidden + hidden * 4 * c
    } else {
        0
    };
    mlp + conv_macs(c, 2 * c, 1, h, w)
        + 2 * c * 9 * h * w
        + conv_macs(c, c, 1, 1, 1)
        + conv_macs(c, c, 1, h, w)
        + conv_macs(c, 2 * c, 1, h, w)
        + conv_macs(c, c, 1, h, w)
}

/// Trainable scalars of the network described by `cfg`.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let mut total = conv_params(3, cfg.width, 3, true) + conv_params(cfg.width, 3, 3, true);
    for l in 0..LEVELS {
        let c = cfg.channels(l);
        total += (cfg.enc_blocks[l] + cfg.dec_blocks[l]) * block_params(cfg, c);
        total += conv_params(c, 2 * c, 2, true);
        total += conv_params(2 * c, 4 * c, 1, false);
    }
    total += cfg.bottom_blocks * block_params(cfg, cfg.channels(LEVELS));
    if cfg.conditioned {
        total += cfg.n_devices * crate::camera::BLOCK_DIM;
    }
    total
}

/// Multiply-accumulates for one `h × w` image (`h`, `w` multiples of 8).
pub fn count_macs(cfg: &ModelConfig, h: usize, w: usize) -> usize {
    let mut total = conv_macs(3, cfg.width, 3, h, w) + conv_macs(cfg.width, 3, 3, h, w);
    for l in 0..LEVELS {
        let c = cfg.channels(l);
        let (hl, wl) = (h >> l, w >> l);
        total += (cfg.enc_blocks[l] + cfg.dec_blocks[l]) * block_macs(cfg, c, hl, wl);
        total += conv_macs(c, 2 * c, 2, hl / 2, wl / 2);
        total += conv_macs(2 * c, 4 * c, 1, hl / 2, wl / 2);
    }
    total += cfg.bottom_blocks * block_macs(cfg, cfg.channels(LEVELS), h >> LEVELS, w >> LEVELS);
    total
}

/// Model size summary reported by the CLI and the service.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Accounting {
    pub params: usize,
    pub macs: usize,
    pub height: usize,
    pub width: usize,
}

impl Accounting {
    pub fn of(cfg: &ModelConfig, height: usize, width: usize) -> Self {
        Self {
            params: count_params(cfg),
            macs: count_macs(cfg, height, width),
            height,
            width,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::CpadNet;

    #[test]
    fn pointwise_conv_example() {
        assert_eq!(conv_params(3, 32, 1, true), 128);
        assert_eq!(conv_macs(3, 32, 1, 256, 256), 6_291_456);
    }

    #[test]
    fn analytic_count_matches_built_network() {
        for cfg in [
            ModelConfig::desk(),
            ModelConfig::desk().baseline(),
            ModelConfig {
                width: 4,
                enc_blocks: [2, 1, 3],
                dec_blocks: [1, 2, 1],
                bottom_blocks: 2,
                ..ModelConfig::desk()
            },
            ModelConfig::full(),
            ModelConfig::full().baseline(),
        ] {
            let net = CpadNet::<f32>::new(cfg.clone(), 0).unwrap();
            assert_eq!(count_params(&cfg), net.param_count(), "{cfg:?}");
        }
    }

    #[test]
    fn conditioning_overhead_is_only_the_mlps() {
        let cfg = ModelConfig::full();
        let delta = count_macs(&cfg, 256, 256) - count_macs(&cfg.clone().baseline(), 256, 256);
        let mlp: usize = (0..=LEVELS)
            .map(|l| {
                let c = cfg.channels(l);
                let n = if l == LEVELS {
                    cfg.bottom_blocks
                } else {
                    cfg.enc_blocks[l] + cfg.dec_blocks[l]
                };
                let h = cfg.mlp_hidden(c);
                n * (27 * h + h * 4 * c)
            })
            .sum();
        assert_eq!(delta, mlp);
    }
}
