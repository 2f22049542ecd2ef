use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Real, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::camera::{encode, CameraParams, DeviceEmbedding, BLOCK_DIM, COND_DIM};
use crate::error::{shape_err, Error, Result};
use crate::net::config::{ModelConfig, LEVELS};
use crate::noise::mix_seed;

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
    depthwise: bool,
}

#[derive(Clone, Copy, Debug)]
enum Norm {
    /// Modulation MLP `cond → hidden → 4C`.
    Adaptive { w1: usize, b1: usize, w2: usize, b2: usize },
    /// Fixed per-channel affine for each of the two norms.
    Affine { g1: usize, b1: usize, g2: usize, b2: usize },
}

#[derive(Clone, Debug)]
struct Block {
    channels: usize,
    norm: Norm,
    pw1: Conv,
    dw: Conv,
    sca: Conv,
    pw2: Conv,
    pw3: Conv,
    pw4: Conv,
    s1: usize,
    s2: usize,
}

impl Block {
    fn param_indices(&self) -> Vec<usize> {
        let norm = match self.norm {
            Norm::Adaptive { w1, b1, w2, b2 } => [w1, b1, w2, b2],
            Norm::Affine { g1, b1, g2, b2 } => [g1, b1, g2, b2],
        };
        let convs = [self.pw1, self.dw, self.sca, self.pw2, self.pw3, self.pw4]
            .into_iter()
            .flat_map(|c| std::iter::once(c.w).chain(c.b));
        norm.into_iter().chain(convs).chain([self.s1, self.s2]).collect()
    }
}

#[derive(Clone, Debug)]
struct Layout {
    intro: Conv,
    enc: Vec<Vec<Block>>,
    down: Vec<Conv>,
    bottom: Vec<Block>,
    up: Vec<Conv>,
    dec: Vec<Vec<Block>>,
    ending: Conv,
    embedding: Option<usize>,
}

/// How parameters of a new tensor are drawn.
enum Init {
    Zeros,
    Ones,
    /// `U(-1/√fan_in, 1/√fan_in)`.
    Uniform(usize),
    Normal,
}

struct Builder<T> {
    rng: ChaCha8Rng,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Builder<T> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Uniform(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| T::of(self.rng.random_range(-bound..bound))).collect()
            }
            Init::Normal => (0..n).map(|_| T::of(self.rng.sample(StandardNormal))).collect(),
        };
        self.names.push(name);
        self.tensors
            .push(Tensor::new(shape, data).expect("shape product matches"));
        self.tensors.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool, zero: bool) -> Conv {
        let fan_in = cin * k * k;
        let init = |z| if z { Init::Zeros } else { Init::Uniform(fan_in) };
        let w = self.add(format!("{name}.weight"), &[cout, cin, k, k], init(zero));
        let b = bias.then(|| self.add(format!("{name}.bias"), &[cout], init(zero)));
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
            depthwise: false,
        }
    }

    fn depthwise(&mut self, name: &str, c: usize, k: usize) -> Conv {
        let w = self.add(format!("{name}.weight"), &[c, 1, k, k], Init::Uniform(k * k));
        let b = Some(self.add(format!("{name}.bias"), &[c], Init::Uniform(k * k)));
        Conv {
            w,
            b,
            stride: 1,
            pad: k / 2,
            depthwise: true,
        }
    }

    fn block(&mut self, name: &str, c: usize, cfg: &ModelConfig) -> Block {
        let norm = if cfg.conditioned {
            let hidden = cfg.mlp_hidden(c);
            Norm::Adaptive {
                w1: self.add(
                    format!("{name}.mod.fc1.weight"),
                    &[hidden, cfg.cond_dim],
                    Init::Uniform(cfg.cond_dim),
                ),
                b1: self.add(format!("{name}.mod.fc1.bias"), &[hidden], Init::Uniform(cfg.cond_dim)),
                w2: self.add(format!("{name}.mod.fc2.weight"), &[4 * c, hidden], Init::Zeros),
                b2: self.add(format!("{name}.mod.fc2.bias"), &[4 * c], Init::Zeros),
            }
        } else {
            Norm::Affine {
                g1: self.add(format!("{name}.norm1.gamma"), &[c], Init::Ones),
                b1: self.add(format!("{name}.norm1.beta"), &[c], Init::Zeros),
                g2: self.add(format!("{name}.norm2.gamma"), &[c], Init::Ones),
                b2: self.add(format!("{name}.norm2.beta"), &[c], Init::Zeros),
            }
        };
        Block {
            channels: c,
            norm,
            pw1: self.conv(&format!("{name}.conv1"), c, 2 * c, 1, 1, true, false),
            dw: self.depthwise(&format!("{name}.conv2"), 2 * c, 3),
            sca: self.conv(&format!("{name}.sca"), c, c, 1, 1, true, false),
            pw2: self.conv(&format!("{name}.conv3"), c, c, 1, 1, true, false),
            pw3: self.conv(&format!("{name}.conv4"), c, 2 * c, 1, 1, true, false),
            pw4: self.conv(&format!("{name}.conv5"), c, c, 1, 1, true, false),
            s1: self.add(format!("{name}.scale1"), &[c], Init::Zeros),
            s2: self.add(format!("{name}.scale2"), &[c], Init::Zeros),
        }
    }
}

fn build_layout<T: Real>(cfg: &ModelConfig, seed: u64) -> (Layout, Vec<String>, Vec<Tensor<T>>) {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        names: Vec::new(),
        tensors: Vec::new(),
    };
    let intro = b.conv("intro", 3, cfg.width, 3, 1, true, false);
    let mut enc = Vec::new();
    let mut down = Vec::new();
    for l in 0..LEVELS {
        let c = cfg.channels(l);
        enc.push(
            (0..cfg.enc_blocks[l])
                .map(|i| b.block(&format!("enc{l}.{i}"), c, cfg))
                .collect(),
        );
        down.push(b.conv(&format!("down{l}"), c, 2 * c, 2, 2, true, false));
        down[l].pad = 0;
    }
    let bottom = (0..cfg.bottom_blocks)
        .map(|i| b.block(&format!("bottom.{i}"), cfg.channels(LEVELS), cfg))
        .collect();
    let mut up = vec![None; LEVELS];
    let mut dec = vec![Vec::new(); LEVELS];
    for l in (0..LEVELS).rev() {
        let c_low = cfg.channels(l + 1);
        up[l] = Some(b.conv(&format!("up{l}"), c_low, 2 * c_low, 1, 1, false, false));
        dec[l] = (0..cfg.dec_blocks[l])
            .map(|i| b.block(&format!("dec{l}.{i}"), cfg.channels(l), cfg))
            .collect();
    }
    let ending = b.conv("ending", cfg.width, 3, 3, 1, true, true);
    let embedding = (cfg.conditioned && cfg.n_devices > 0)
        .then(|| b.add("device_embedding".into(), &[cfg.n_devices, BLOCK_DIM], Init::Normal));
    let layout = Layout {
        intro,
        enc,
        down,
        bottom,
        up: up.into_iter().map(|c| c.expect("every level built")).collect(),
        dec,
        ending,
        embedding,
    };
    (layout, b.names, b.tensors)
}

/// Forward-pass behaviour that differs between training and inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    pub training: bool,
    /// Base seed of the dropout masks.
    pub seed: u64,
}

impl Mode {
    pub fn eval() -> Self {
        Self {
            training: false,
            seed: 0,
        }
    }

    pub fn train(seed: u64) -> Self {
        Self { training: true, seed }
    }
}

/// Condition input of a batch: `vector` is `(N, 27)`; rows whose entry in
/// `devices` is set take their third block from the learned device embedding.
#[derive(Clone, Copy, Debug)]
pub struct Cond<'a> {
    pub vector: Var,
    pub devices: &'a [Option<usize>],
}

/// The U-shaped denoiser: conditioned (adaptive norms) or baseline.
#[derive(Clone, Debug)]
pub struct CpadNet<T> {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl<T: Real> CpadNet<T> {
    /// Fresh network; weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, names, params) = build_layout(&config, seed);
        Ok(Self {
            config,
            layout,
            names,
            params,
        })
    }

    /// Rebuild from stored tensors; names and shapes must match `config`.
    pub fn from_parts(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        if named.len() != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                net.params.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != net.names[i] || t.shape() != net.params[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {i}: expected {} {:?}, found {name} {:?}",
                    net.names[i],
                    net.params[i].shape(),
                    t.shape()
                )));
            }
            net.params[i] = t;
        }
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> CpadNet<U> {
        CpadNet {
            config: self.config.clone(),
            layout: self.layout.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Add `N(0, scale²)` noise to every parameter, including zero-initialized ones.
    pub fn perturb(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &mut self.params {
            for v in t.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += T::of(scale * z);
            }
        }
    }

    /// Place every parameter on `tape` in store order.
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect()
    }

    pub fn device_embedding(&self) -> Option<DeviceEmbedding> {
        let t = &self.params[self.layout.embedding?];
        let w = t.data().iter().map(|&v| v.to_f64()).collect();
        DeviceEmbedding::new(self.config.n_devices, w).ok()
    }

    /// Condition rows `(N, 27)` and per-row device codes for a batch of captures.
    pub fn condition_batch(&self, cams: &[CameraParams]) -> Result<(Tensor<T>, Vec<Option<usize>>)> {
        let emb = self.device_embedding();
        let mut data = Vec::with_capacity(cams.len() * COND_DIM);
        let mut devices = Vec::with_capacity(cams.len());
        for cam in cams {
            let v = encode(cam, &self.config.ranges, emb.as_ref())?;
            data.extend(v.values().iter().map(|&x| T::of(x)));
            devices.push(if cam.f_number.is_some() { None } else { cam.device_code });
        }
        Ok((Tensor::new(&[cams.len(), COND_DIM], data)?, devices))
    }

    /// Apply the network to `x (N,3,H,W)`; `H` and `W` must be multiples of 8.
    /// `pv` are this network's parameters as returned by [`CpadNet::register`].
    pub fn forward(&self, tape: &mut Tape<T>, pv: &[Var], x: Var, cond: Option<Cond<'_>>, mode: Mode) -> Result<Var> {
        if pv.len() != self.params.len() {
            return shape_err(
                "cpadnet",
                format!("{} parameter vars for {} parameters", pv.len(), self.params.len()),
            );
        }
        let (n, c, h, w) = tape.value(x).dims4("cpadnet")?;
        let m = self.config.size_multiple();
        if c != 3 || h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return shape_err(
                "cpadnet",
                format!(
                    "input {:?} must be (N,3,H,W) with H and W multiples of {m}",
                    tape.value(x).shape()
                ),
            );
        }
        let v = if self.config.conditioned {
            let cond = cond.ok_or_else(|| Error::InvalidParams("conditioned model needs a condition vector".into()))?;
            Some(self.effective_condition(tape, pv, cond, n)?)
        } else {
            None
        };

        let lay = &self.layout;
        let mut blk_idx = 0u64;
        let mut run = |tape: &mut Tape<T>, blocks: &[Block], mut h: Var| -> Result<Var> {
            for b in blocks {
                h = self.block(tape, pv, b, h, v, mode, mix_seed(mode.seed, blk_idx))?;
                blk_idx += 1;
            }
            Ok(h)
        };

        let mut h = conv(tape, pv, &lay.intro, x)?;
        let mut skips = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            h = run(tape, &lay.enc[l], h)?;
            skips.push(h);
            h = conv(tape, pv, &lay.down[l], h)?;
        }
        h = run(tape, &lay.bottom, h)?;
        for l in (0..LEVELS).rev() {
            h = conv(tape, pv, &lay.up[l], h)?;
            h = tape.pixel_shuffle(h, 2)?;
            h = tape.add(h, skips[l])?;
            h = run(tape, &lay.dec[l], h)?;
        }
        h = conv(tape, pv, &lay.ending, h)?;
        tape.add(x, h)
    }

    fn effective_condition(&self, tape: &mut Tape<T>, pv: &[Var], cond: Cond<'_>, n: usize) -> Result<Var> {
        let shape = tape.value(cond.vector).shape().to_vec();
        if shape != [n, self.config.cond_dim] {
            return shape_err("cpadnet", format!("condition {shape:?} for batch of {n}"));
        }
        if !cond.devices.is_empty() && cond.devices.len() != n {
            return shape_err(
                "cpadnet",
                format!("{} device codes for batch of {n}", cond.devices.len()),
            );
        }
        if cond.devices.iter().all(Option::is_none) {
            return Ok(cond.vector);
        }
        let emb = self.layout.embedding.ok_or(Error::DeviceOutOfRange {
            code: cond.devices.iter().flatten().copied().next().unwrap_or(0),
            n_devices: 0,
        })?;
        let codes: Vec<usize> = cond.devices.iter().map(|d| d.unwrap_or(0)).collect();
        let rows = tape.gather_rows(pv[emb], &codes)?;
        let learned = tape.sigmoid(rows)?;
        let mask: Vec<T> = cond
            .devices
            .iter()
            .flat_map(|d| std::iter::repeat_n(if d.is_some() { T::one() } else { T::zero() }, BLOCK_DIM))
            .collect();
        let keep: Vec<T> = mask.iter().map(|&m| T::one() - m).collect();
        let mask = tape.constant(Tensor::new(&[n, BLOCK_DIM], mask)?);
        let keep = tape.constant(Tensor::new(&[n, BLOCK_DIM], keep)?);
        let head = tape.narrow(cond.vector, 0, 2 * BLOCK_DIM)?;
        let given = tape.narrow(cond.vector, 2 * BLOCK_DIM, BLOCK_DIM)?;
        let a = tape.mul(given, keep)?;
        let b = tape.mul(learned, mask)?;
        let third = tape.add(a, b)?;
        tape.concat(head, third)
    }

    fn modulation(
        &self,
        tape: &mut Tape<T>,
        pv: &[Var],
        b: &Block,
        v: Option<Var>,
        mode: Mode,
        seed: u64,
    ) -> Result<[Modulation; 2]> {
        match b.norm {
            Norm::Affine { g1, b1, g2, b2 } => Ok([
                Modulation {
                    scale: pv[g1],
                    shift: pv[b1],
                },
                Modulation {
                    scale: pv[g2],
                    shift: pv[b2],
                },
            ]),
            Norm::Adaptive { w1, b1, w2, b2 } => {
                let v = v.expect("conditioned forward always has a condition");
                let mlp = [pv[w1], pv[b1], pv[w2], pv[b2]];
                adaln_modulation(tape, v, mlp, b.channels, self.config.dropout, mode.training, seed)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &mut Tape<T>,
        pv: &[Var],
        b: &Block,
        x: Var,
        v: Option<Var>,
        mode: Mode,
        seed: u64,
    ) -> Result<Var> {
        let [m1, m2] = self.modulation(tape, pv, b, v, mode, seed)?;

        let t = modulated_norm(tape, x, m1)?;
        let t = conv(tape, pv, &b.pw1, t)?;
        let t = conv(tape, pv, &b.dw, t)?;
        let (ga, gb) = tape.chunk2(t)?;
        let t = tape.mul(ga, gb)?;
        let att = tape.global_avg_pool(t)?;
        let att = conv(tape, pv, &b.sca, att)?;
        let t = tape.mul_channel(t, att)?;
        let t = conv(tape, pv, &b.pw2, t)?;
        let t = tape.mul_channel(t, pv[b.s1])?;
        let x = tape.add(x, t)?;

        let u = modulated_norm(tape, x, m2)?;
        let u = conv(tape, pv, &b.pw3, u)?;
        let (ga, gb) = tape.chunk2(u)?;
        let u = tape.mul(ga, gb)?;
        let u = conv(tape, pv, &b.pw4, u)?;
        let u = tape.mul_channel(u, pv[b.s2])?;
        tape.add(x, u)
    }

    /// Blocks in forward order.
    fn blocks(&self) -> impl Iterator<Item = &Block> {
        let l = &self.layout;
        l.enc
            .iter()
            .flatten()
            .chain(&l.bottom)
            .chain(l.dec.iter().rev().flatten())
    }

    /// Parameter indices and channel count of block `i` in forward order.
    pub(crate) fn block_params(&self, i: usize) -> Option<(Vec<usize>, usize)> {
        self.blocks().nth(i).map(|b| (b.param_indices(), b.channels))
    }

    /// Apply block `i` on its own; `v` is required for conditioned networks.
    pub(crate) fn block_forward(
        &self,
        tape: &mut Tape<T>,
        pv: &[Var],
        i: usize,
        x: Var,
        v: Option<Var>,
        mode: Mode,
    ) -> Result<Var> {
        let b = self
            .blocks()
            .nth(i)
            .ok_or_else(|| Error::Domain(format!("no block {i}")))?;
        self.block(tape, pv, b, x, v, mode, mix_seed(mode.seed, i as u64))
    }

    /// Inference on a batch. `cams` is required for conditioned models and ignored otherwise.
    pub fn denoise(&self, x: &Tensor<T>, cams: Option<&[CameraParams]>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let pv = self.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = match (self.config.conditioned, cams) {
            (true, Some(cams)) => {
                let (v, devices) = self.condition_batch(cams)?;
                let vector = tape.constant(v);
                self.forward(
                    &mut tape,
                    &pv,
                    xv,
                    Some(Cond {
                        vector,
                        devices: &devices,
                    }),
                    Mode::eval(),
                )?
            }
            (true, None) => return Err(Error::InvalidParams("conditioned model needs camera parameters".into())),
            (false, _) => self.forward(&mut tape, &pv, xv, None, Mode::eval())?,
        };
        Ok(tape.value(out).clone())
    }
}

/// Per-channel affine applied after a layer norm; either operand may be shared `(C)`
/// or per-sample `(N, C)`.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub scale: Var,
    pub shift: Var,
}

/// Run a block's modulation MLP on `v (N, cond)`: `silu(fc1)`, dropout on the hidden
/// activation, `fc2` to `4C` outputs split as `(Δγ1, β1, Δγ2, β2)`. Returns the
/// `(1 + Δγ, β)` pairs for the block's two norms. `mlp` is `[w1, b1, w2, b2]`.
pub fn adaln_modulation<T: Real>(
    tape: &mut Tape<T>,
    v: Var,
    mlp: [Var; 4],
    channels: usize,
    dropout: f64,
    training: bool,
    seed: u64,
) -> Result<[Modulation; 2]> {
    let [w1, b1, w2, b2] = mlp;
    let h = tape.linear(v, w1, Some(b1))?;
    let h = tape.silu(h)?;
    let h = tape.dropout(h, dropout, training, seed)?;
    let out = tape.linear(h, w2, Some(b2))?;
    let mut parts = [out; 4];
    for (i, p) in parts.iter_mut().enumerate() {
        *p = tape.narrow(out, i * channels, channels)?;
    }
    Ok([
        Modulation {
            scale: tape.add_scalar(parts[0], T::one())?,
            shift: parts[1],
        },
        Modulation {
            scale: tape.add_scalar(parts[2], T::one())?,
            shift: parts[3],
        },
    ])
}

/// `layer_norm(x) ⊙ scale + shift`.
pub fn modulated_norm<T: Real>(tape: &mut Tape<T>, x: Var, m: Modulation) -> Result<Var> {
    let t = tape.layer_norm(x, T::of(LAYER_NORM_EPS))?;
    let t = tape.mul_channel(t, m.scale)?;
    tape.add_channel(t, m.shift)
}

/// Adaptive layer norm for norm `which` (0 or 1) of a block with `channels` channels.
#[allow(clippy::too_many_arguments)]
pub fn adaln<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    v: Var,
    mlp: [Var; 4],
    which: usize,
    dropout: f64,
    training: bool,
    seed: u64,
) -> Result<Var> {
    let channels = tape.value(x).ncp("adaln")?.1;
    let m = adaln_modulation(tape, v, mlp, channels, dropout, training, seed)?;
    let m = *m
        .get(which)
        .ok_or_else(|| Error::Domain(format!("adaln norm index {which} not in 0..2")))?;
    modulated_norm(tape, x, m)
}

fn conv<T: Real>(tape: &mut Tape<T>, pv: &[Var], c: &Conv, x: Var) -> Result<Var> {
    let b = c.b.map(|i| pv[i]);
    if c.depthwise {
        tape.depthwise_conv2d(x, pv[c.w], b, c.pad)
    } else {
        tape.conv2d(x, pv[c.w], b, c.stride, c.pad)
    }
}
