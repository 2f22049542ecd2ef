//! Reverse-mode tape.
//!
//! Every op appends a node holding its forward value. Node order is a valid
//! topological order, so `backward` walks the tape once from the root towards
//! the leaves and accumulates gradients into fresh buffers (the tape itself is
//! never mutated by a backward pass).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::real::matmul;
use crate::autodiff::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulChannel {
        x: Var,
        s: Var,
        per_sample: bool,
    },
    AddChannel {
        x: Var,
        b: Var,
        per_sample: bool,
    },
    Narrow {
        x: Var,
        start: usize,
    },
    Concat(Var, Var),
    GatherRows {
        table: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    DepthwiseConv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        rstd: Vec<T>,
    },
    Silu(Var),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    PixelShuffle {
        x: Var,
        r: usize,
    },
    PixelUnshuffle {
        x: Var,
        r: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    L1Loss {
        pred: Var,
        target: Var,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` when `v` does not depend on any tracked leaf
    /// or was not reached from the root.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn channel_index(per_sample: bool, n: usize, c: usize, channels: usize) -> usize {
    if per_sample {
        n * channels + c
    } else {
        c
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return shape_err(op, format!("{sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    /// Classifies a per-channel operand against `x` of shape `(N, C, ...)`.
    fn channel_operand(&self, op: &'static str, x: Var, s: Var) -> Result<bool> {
        let (n, c, _) = self.value(x).ncp(op)?;
        let len = self.value(s).len();
        if len == n * c {
            Ok(true)
        } else if len == c {
            Ok(false)
        } else {
            shape_err(
                op,
                format!(
                    "per-channel operand {:?} does not fit {:?}",
                    self.value(s).shape(),
                    self.value(x).shape()
                ),
            )
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        Ok(self.push(out, Op::AddScalar(x), &[x]))
    }

    /// `x[n,c,..] * s[c]` or `x[n,c,..] * s[n,c]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let per_sample = self.channel_operand("mul_channel", x, s)?;
        let vx = self.value(x);
        let (n, c, p) = vx.ncp("mul_channel")?;
        let sv = self.value(s).data();
        let mut out = vx.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let k = sv[channel_index(per_sample, ni, ci, c)];
                let base = (ni * c + ci) * p;
                out[base..base + p].iter_mut().for_each(|v| *v *= k);
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        Ok(self.push(out, Op::MulChannel { x, s, per_sample }, &[x, s]))
    }

    /// `x[n,c,..] + b[c]` or `x[n,c,..] + b[n,c]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let per_sample = self.channel_operand("add_channel", x, b)?;
        let vx = self.value(x);
        let (n, c, p) = vx.ncp("add_channel")?;
        let bv = self.value(b).data();
        let mut out = vx.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let k = bv[channel_index(per_sample, ni, ci, c)];
                let base = (ni * c + ci) * p;
                out[base..base + p].iter_mut().for_each(|v| *v += k);
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        Ok(self.push(out, Op::AddChannel { x, b, per_sample }, &[x, b]))
    }

    /// Slice `len` channels (dim 1) starting at `start`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (n, c, p) = vx.ncp("narrow")?;
        if start + len > c || len == 0 {
            return shape_err("narrow", format!("range {start}..{} of {c} channels", start + len));
        }
        let mut data = Vec::with_capacity(n * len * p);
        for ni in 0..n {
            let base = (ni * c + start) * p;
            data.extend_from_slice(&vx.data()[base..base + len * p]);
        }
        let mut shape = vx.shape().to_vec();
        shape[1] = len;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Narrow { x, start }, &[x]))
    }

    /// Split the channel dimension into two equal halves.
    pub fn chunk2(&mut self, x: Var) -> Result<(Var, Var)> {
        let c = self.value(x).ncp("chunk2")?.1;
        if c % 2 != 0 {
            return shape_err("chunk2", format!("odd channel count {c}"));
        }
        Ok((self.narrow(x, 0, c / 2)?, self.narrow(x, c / 2, c / 2)?))
    }

    /// Concatenate along dim 1.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, ca, p) = va.ncp("concat")?;
        let (nb, cb, pb) = vb.ncp("concat")?;
        if n != nb || p != pb || va.shape()[2..] != vb.shape()[2..] {
            return shape_err("concat", format!("{:?} vs {:?}", va.shape(), vb.shape()));
        }
        let mut data = Vec::with_capacity(n * (ca + cb) * p);
        for ni in 0..n {
            data.extend_from_slice(&va.data()[ni * ca * p..(ni + 1) * ca * p]);
            data.extend_from_slice(&vb.data()[ni * cb * p..(ni + 1) * cb * p]);
        }
        let mut shape = va.shape().to_vec();
        shape[1] = ca + cb;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Concat(a, b), &[a, b]))
    }

    /// Embedding lookup: rows of an `(R, D)` table.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (r, d) = vt.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            if i >= r {
                return Err(Error::DeviceOutOfRange { code: i, n_devices: r });
            }
            data.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[rows.len(), d], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Cross-correlation with square kernels: `x (N,Ci,H,W)`, `w (Co,Ci,k,k)`, `b (Co)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x), self.value(w), stride, pad)?;
        if let Some(b) = b {
            if self.value(b).len() != geom.co {
                return shape_err(
                    "conv2d",
                    format!("bias {:?} for {} outputs", self.value(b).shape(), geom.co),
                );
            }
        }
        let vx = self.value(x).data();
        let vw = self.value(w).data();
        let (kdim, pout) = (geom.kdim(), geom.pout());
        let mut out = vec![T::zero(); geom.n * geom.co * pout];
        let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { kdim * pout }];
        for ni in 0..geom.n {
            let xs = &vx[ni * geom.ci * geom.h * geom.w..(ni + 1) * geom.ci * geom.h * geom.w];
            let cols_ref: &[T] = if geom.is_pointwise() {
                xs
            } else {
                geom.im2col(xs, &mut cols);
                &cols
            };
            let os = &mut out[ni * geom.co * pout..(ni + 1) * geom.co * pout];
            matmul(geom.co, kdim, pout, vw, false, cols_ref, false, os, false);
            if let Some(b) = b {
                let bv = self.value(b).data();
                for co in 0..geom.co {
                    os[co * pout..(co + 1) * pout].iter_mut().for_each(|v| *v += bv[co]);
                }
            }
        }
        let out = Tensor::new(&[geom.n, geom.co, geom.ho, geom.wo], out)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, &parents))
    }

    /// Depthwise cross-correlation, stride 1: `x (N,C,H,W)`, `w (C,1,k,k)`, `b (C)`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4("depthwise_conv2d")?;
        let (k, ho, wo) = dw_geom(self.value(w), c, h, wd, pad)?;
        if let Some(b) = b {
            if self.value(b).len() != c {
                return shape_err("depthwise_conv2d", "bias length != channels");
            }
        }
        let vx = self.value(x).data();
        let vw = self.value(w).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for ni in 0..n {
            for ci in 0..c {
                let xs = &vx[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                let os = &mut out[(ni * c + ci) * ho * wo..(ni * c + ci + 1) * ho * wo];
                if let Some(b) = b {
                    let bv = self.value(b).data()[ci];
                    os.iter_mut().for_each(|v| *v = bv);
                }
                let ws = &vw[ci * k * k..(ci + 1) * k * k];
                dw_taps(k, pad, h, wd, ho, wo, |ki, kj, oh, ih, ow0, iw0, len| {
                    let wv = ws[ki * k + kj];
                    let orow = &mut os[oh * wo + ow0..oh * wo + ow0 + len];
                    let irow = &xs[ih * wd + iw0..ih * wd + iw0 + len];
                    for (o, &i) in orow.iter_mut().zip(irow) {
                        *o += wv * i;
                    }
                });
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::DepthwiseConv2d { x, w, b, pad }, &parents))
    }

    /// `x (N,Din) · wᵀ + b` with `w (Dout,Din)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.value(x).dims2("linear")?;
        let (dout, wdin) = self.value(w).dims2("linear")?;
        if din != wdin {
            return shape_err(
                "linear",
                format!(
                    "input {:?} vs weight {:?}",
                    self.value(x).shape(),
                    self.value(w).shape()
                ),
            );
        }
        let mut out = vec![T::zero(); n * dout];
        matmul(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != dout {
                return shape_err("linear", format!("bias length {} != {dout}", bv.len()));
            }
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o += bb);
            }
        }
        let out = Tensor::new(&[n, dout], out)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Linear { x, w, b }, &parents))
    }

    /// Normalizes over dim 1 (channels) independently at every sample and spatial
    /// position. No affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let (n, c, p) = vx.ncp("layer_norm")?;
        let xd = vx.data();
        let inv_c = T::one() / T::of(c as f64);
        let mut out = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); n * p];
        let mut mean = vec![T::zero(); p];
        let mut var = vec![T::zero(); p];
        for ni in 0..n {
            let xs = &xd[ni * c * p..(ni + 1) * c * p];
            mean.iter_mut().for_each(|m| *m = T::zero());
            var.iter_mut().for_each(|m| *m = T::zero());
            for row in xs.chunks(p) {
                mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m *= inv_c);
            for row in xs.chunks(p) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - m;
                    *s += d * d;
                }
            }
            let rs = &mut rstd[ni * p..(ni + 1) * p];
            for (r, &s) in rs.iter_mut().zip(&var) {
                *r = T::one() / (s * inv_c + eps).sqrt();
            }
            let os = &mut out[ni * c * p..(ni + 1) * c * p];
            for (orow, row) in os.chunks_mut(p).zip(xs.chunks(p)) {
                for (((o, &v), &m), &r) in orow.iter_mut().zip(row).zip(&mean).zip(rs.iter()) {
                    *o = (v - m) * r;
                }
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, rstd }, &[x]))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * sigmoid(v));
        Ok(self.push(out, Op::Silu(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        Ok(self.push(out, Op::Sigmoid(x), &[x]))
    }

    /// `(N,C,H,W) -> (N,C,1,1)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4("global_avg_pool")?;
        let inv = T::one() / T::of((h * w) as f64);
        let data = vx
            .data()
            .chunks(h * w)
            .map(|s| s.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(&[n, c, 1, 1], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    /// `(N, C·r², H, W) -> (N, C, H·r, W·r)`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (n, cr, h, w) = self.value(x).dims4("pixel_shuffle")?;
        if r == 0 || cr % (r * r) != 0 {
            return shape_err("pixel_shuffle", format!("{cr} channels not divisible by {r}²"));
        }
        let c = cr / (r * r);
        let mut out = vec![T::zero(); self.value(x).len()];
        shuffle(self.value(x).data(), &mut out, n, c, h, w, r, false);
        let out = Tensor::new(&[n, c, h * r, w * r], out)?;
        Ok(self.push(out, Op::PixelShuffle { x, r }, &[x]))
    }

    /// `(N, C, H, W) -> (N, C·r², H/r, W/r)`.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("pixel_unshuffle")?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return shape_err("pixel_unshuffle", format!("{h}x{w} not divisible by {r}"));
        }
        let mut out = vec![T::zero(); self.value(x).len()];
        shuffle(self.value(x).data(), &mut out, n, c, h / r, w / r, r, true);
        let out = Tensor::new(&[n, c * r * r, h / r, w / r], out)?;
        Ok(self.push(out, Op::PixelUnshuffle { x, r }, &[x]))
    }

    /// Inverted dropout with a mask drawn from `seed`. Identity when not training or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain(format!("dropout probability {p} outside [0,1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(vx.shape(), data)?;
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    /// Mean absolute error, returned as a single-element tensor.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("l1_loss", pred, target)?;
        let vp = self.value(pred);
        let n = vp.len().max(1);
        let s: T = vp
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        let out = Tensor::scalar(s / T::of(n as f64));
        Ok(self.push(out, Op::L1Loss { pred, target }, &[pred, target]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    /// Backpropagate from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return shape_err("backward", format!("root must hold one element, got {:?}", rv.shape()));
        }
        self.backward_with(root, vec![T::one()])
    }

    /// Backpropagate an explicit upstream gradient `seed` (same length as `root`).
    pub fn backward_with(&self, root: Var, seed: Vec<T>) -> Result<Gradients<T>> {
        if seed.len() != self.value(root).len() {
            return shape_err("backward", "seed length differs from root");
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else {
                continue;
            };
            self.backprop_node(node, g, lo);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, lo: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(lo[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], lo: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.slot(lo, v) {
                        ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let ov = self.value(other).data();
                    if let Some(ga) = self.slot(lo, v) {
                        for ((d, &s), &o) in ga.iter_mut().zip(g).zip(ov) {
                            *d += s * o;
                        }
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = self.slot(lo, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
            Op::MulChannel { x, s, per_sample } => {
                let vx = self.value(*x);
                let (n, c, p) = vx.ncp("mul_channel").expect("checked in forward");
                let sv = self.value(*s).data();
                if let Some(gx) = self.slot(lo, *x) {
                    for ni in 0..n {
                        for ci in 0..c {
                            let k = sv[channel_index(*per_sample, ni, ci, c)];
                            let base = (ni * c + ci) * p;
                            for (d, &u) in gx[base..base + p].iter_mut().zip(&g[base..base + p]) {
                                *d += u * k;
                            }
                        }
                    }
                }
                if let Some(gs) = self.slot(lo, *s) {
                    let xd = vx.data();
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * p;
                            let dot: T = g[base..base + p]
                                .iter()
                                .zip(&xd[base..base + p])
                                .map(|(&u, &v)| u * v)
                                .sum();
                            gs[channel_index(*per_sample, ni, ci, c)] += dot;
                        }
                    }
                }
            }
            Op::AddChannel { x, b, per_sample } => {
                let (n, c, p) = self.value(*x).ncp("add_channel").expect("checked in forward");
                if let Some(gx) = self.slot(lo, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = self.slot(lo, *b) {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * p;
                            gb[channel_index(*per_sample, ni, ci, c)] += g[base..base + p].iter().copied().sum();
                        }
                    }
                }
            }
            Op::Narrow { x, start } => {
                let (n, c, p) = self.value(*x).ncp("narrow").expect("checked in forward");
                let len = node.value.shape()[1];
                if let Some(gx) = self.slot(lo, *x) {
                    for ni in 0..n {
                        let dst = (ni * c + start) * p;
                        let src = ni * len * p;
                        for (d, &s) in gx[dst..dst + len * p].iter_mut().zip(&g[src..src + len * p]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let (n, ca, p) = self.value(*a).ncp("concat").expect("checked in forward");
                let cb = self.value(*b).shape()[1];
                let ct = ca + cb;
                for (v, off, cv) in [(*a, 0, ca), (*b, ca, cb)] {
                    if let Some(gv) = self.slot(lo, v) {
                        for ni in 0..n {
                            let src = (ni * ct + off) * p;
                            let dst = ni * cv * p;
                            for (d, &s) in gv[dst..dst + cv * p].iter_mut().zip(&g[src..src + cv * p]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::GatherRows { table, rows } => {
                let d = self.value(*table).shape()[1];
                if let Some(gt) = self.slot(lo, *table) {
                    for (k, &r) in rows.iter().enumerate() {
                        for (dst, &s) in gt[r * d..(r + 1) * d].iter_mut().zip(&g[k * d..(k + 1) * d]) {
                            *dst += s;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => self.conv2d_backward(*x, *w, *b, *stride, *pad, g, lo),
            Op::DepthwiseConv2d { x, w, b, pad } => self.depthwise_backward(*x, *w, *b, *pad, g, lo),
            Op::Linear { x, w, b } => {
                let (n, din) = self.value(*x).dims2("linear").expect("checked in forward");
                let dout = self.value(*w).shape()[0];
                if let Some(gx) = self.slot(lo, *x) {
                    matmul(n, dout, din, g, false, self.value(*w).data(), false, gx, true);
                }
                if let Some(gw) = self.slot(lo, *w) {
                    matmul(dout, n, din, g, true, self.value(*x).data(), false, gw, true);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(lo, *b) {
                        for row in g.chunks(dout) {
                            gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let (n, c, p) = self.value(*x).ncp("layer_norm").expect("checked in forward");
                let y = node.value.data();
                let inv_c = T::one() / T::of(c as f64);
                if let Some(gx) = self.slot(lo, *x) {
                    let mut mg = vec![T::zero(); p];
                    let mut mgy = vec![T::zero(); p];
                    for ni in 0..n {
                        let range = ni * c * p..(ni + 1) * c * p;
                        let (gs, ys) = (&g[range.clone()], &y[range.clone()]);
                        mg.iter_mut().for_each(|v| *v = T::zero());
                        mgy.iter_mut().for_each(|v| *v = T::zero());
                        for (grow, yrow) in gs.chunks(p).zip(ys.chunks(p)) {
                            for (((a, b), &gv), &yv) in mg.iter_mut().zip(mgy.iter_mut()).zip(grow).zip(yrow) {
                                *a += gv;
                                *b += gv * yv;
                            }
                        }
                        let rs = &rstd[ni * p..(ni + 1) * p];
                        let gxs = &mut gx[range];
                        for ((dst, grow), yrow) in gxs.chunks_mut(p).zip(gs.chunks(p)).zip(ys.chunks(p)) {
                            for (j, d) in dst.iter_mut().enumerate() {
                                *d += rs[j] * (grow[j] - mg[j] * inv_c - yrow[j] * mgy[j] * inv_c);
                            }
                        }
                    }
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(lo, *x) {
                    for ((d, &u), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(v);
                        *d += u * s * (T::one() + v * (T::one() - s));
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(gx) = self.slot(lo, *x) {
                    for ((d, &u), &s) in gx.iter_mut().zip(g).zip(y) {
                        *d += u * s * (T::one() - s);
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4("global_avg_pool").expect("checked");
                let inv = T::one() / T::of((h * w) as f64);
                if let Some(gx) = self.slot(lo, *x) {
                    for (plane, &u) in gx.chunks_mut(h * w).zip(g) {
                        plane.iter_mut().for_each(|d| *d += u * inv);
                    }
                }
            }
            Op::PixelShuffle { x, r } => {
                let (n, c, h, w) = node.value.dims4("pixel_shuffle").expect("checked");
                if let Some(gx) = self.slot(lo, *x) {
                    let mut tmp = vec![T::zero(); g.len()];
                    shuffle(g, &mut tmp, n, c, h / r, w / r, *r, true);
                    gx.iter_mut().zip(&tmp).for_each(|(d, &s)| *d += s);
                }
            }
            Op::PixelUnshuffle { x, r } => {
                let (n, c, h, w) = self.value(*x).dims4("pixel_unshuffle").expect("checked");
                if let Some(gx) = self.slot(lo, *x) {
                    let mut tmp = vec![T::zero(); g.len()];
                    shuffle(g, &mut tmp, n, c, h / r, w / r, *r, false);
                    gx.iter_mut().zip(&tmp).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.slot(lo, *x) {
                    for ((d, &u), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += u * m;
                    }
                }
            }
            Op::L1Loss { pred, target } => {
                let n = T::of(self.value(*pred).len().max(1) as f64);
                let scale = g[0] / n;
                let (pv, tv) = (self.value(*pred).data(), self.value(*target).data());
                for (v, sign) in [(*pred, T::one()), (*target, -T::one())] {
                    if let Some(gv) = self.slot(lo, v) {
                        for ((d, &a), &b) in gv.iter_mut().zip(pv).zip(tv) {
                            let diff = a - b;
                            let sg = if diff > T::zero() {
                                T::one()
                            } else if diff < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            *d += sign * sg * scale;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(lo, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &[T],
        lo: &mut [Option<Vec<T>>],
    ) {
        let geom = ConvGeom::new(self.value(x), self.value(w), stride, pad).expect("checked in forward");
        let (kdim, pout) = (geom.kdim(), geom.pout());
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let in_len = geom.ci * geom.h * geom.w;
        let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { kdim * pout }];
        if let Some(gw) = self.slot(lo, w) {
            for ni in 0..geom.n {
                let xs = &xd[ni * in_len..(ni + 1) * in_len];
                let cols_ref: &[T] = if geom.is_pointwise() {
                    xs
                } else {
                    geom.im2col(xs, &mut cols);
                    &cols
                };
                let gs = &g[ni * geom.co * pout..(ni + 1) * geom.co * pout];
                matmul(geom.co, pout, kdim, gs, false, cols_ref, true, gw, true);
            }
        }
        if let Some(gx) = self.slot(lo, x) {
            let mut gcols = vec![T::zero(); kdim * pout];
            for ni in 0..geom.n {
                let gs = &g[ni * geom.co * pout..(ni + 1) * geom.co * pout];
                let gxs = &mut gx[ni * in_len..(ni + 1) * in_len];
                if geom.is_pointwise() {
                    matmul(kdim, geom.co, pout, wd, true, gs, false, gxs, true);
                } else {
                    matmul(kdim, geom.co, pout, wd, true, gs, false, &mut gcols, false);
                    geom.col2im_add(&gcols, gxs);
                }
            }
        }
        if let Some(b) = b {
            if let Some(gb) = self.slot(lo, b) {
                for (i, plane) in g.chunks(pout).enumerate() {
                    gb[i % geom.co] += plane.iter().copied().sum();
                }
            }
        }
    }

    fn depthwise_backward(&self, x: Var, w: Var, b: Option<Var>, pad: usize, g: &[T], lo: &mut [Option<Vec<T>>]) {
        let (n, c, h, wd) = self.value(x).dims4("depthwise_conv2d").expect("checked");
        let (k, ho, wo) = dw_geom(self.value(w), c, h, wd, pad).expect("checked");
        let xd = self.value(x).data();
        let wv = self.value(w).data();
        if let Some(gx) = self.slot(lo, x) {
            for ni in 0..n {
                for ci in 0..c {
                    let gs = &g[(ni * c + ci) * ho * wo..(ni * c + ci + 1) * ho * wo];
                    let gxs = &mut gx[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                    let ws = &wv[ci * k * k..(ci + 1) * k * k];
                    dw_taps(k, pad, h, wd, ho, wo, |ki, kj, oh, ih, ow0, iw0, len| {
                        let wk = ws[ki * k + kj];
                        let grow = &gs[oh * wo + ow0..oh * wo + ow0 + len];
                        let xrow = &mut gxs[ih * wd + iw0..ih * wd + iw0 + len];
                        for (d, &u) in xrow.iter_mut().zip(grow) {
                            *d += wk * u;
                        }
                    });
                }
            }
        }
        if let Some(gw) = self.slot(lo, w) {
            for ni in 0..n {
                for ci in 0..c {
                    let gs = &g[(ni * c + ci) * ho * wo..(ni * c + ci + 1) * ho * wo];
                    let xs = &xd[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                    let gws = &mut gw[ci * k * k..(ci + 1) * k * k];
                    dw_taps(k, pad, h, wd, ho, wo, |ki, kj, oh, ih, ow0, iw0, len| {
                        let grow = &gs[oh * wo + ow0..oh * wo + ow0 + len];
                        let xrow = &xs[ih * wd + iw0..ih * wd + iw0 + len];
                        gws[ki * k + kj] += grow.iter().zip(xrow).map(|(&u, &v)| u * v).sum();
                    });
                }
            }
        }
        if let Some(b) = b {
            if let Some(gb) = self.slot(lo, b) {
                for (i, plane) in g.chunks(ho * wo).enumerate() {
                    gb[i % c] += plane.iter().copied().sum();
                }
            }
        }
    }
}

/// Geometry of a dense square-kernel convolution.
struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let (n, ci, h, wd) = x.dims4("conv2d")?;
        let (co, wci, kh, kw) = w.dims4("conv2d")?;
        if wci != ci || kh != kw || stride == 0 {
            return shape_err(
                "conv2d",
                format!("input {:?}, weight {:?}, stride {stride}", x.shape(), w.shape()),
            );
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err("conv2d", format!("kernel {kh} larger than padded input {h}x{wd}"));
        }
        Ok(Self {
            n,
            ci,
            h,
            w: wd,
            co,
            k: kh,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn kdim(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn pout(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Visits every (column-matrix index, input index) pair with a valid input tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        for ci in 0..self.ci {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    for oh in 0..self.ho {
                        let ih = (oh * s + ki) as isize - p;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        for ow in 0..self.wo {
                            let iw = (ow * s + kj) as isize - p;
                            if iw < 0 || iw >= self.w as isize {
                                continue;
                            }
                            f(
                                row * self.pout() + oh * self.wo + ow,
                                (ci * self.h + ih as usize) * self.w + iw as usize,
                            );
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        cols.iter_mut().for_each(|v| *v = T::zero());
        self.for_each_tap(|col, xi| cols[col] = x[xi]);
    }

    fn col2im_add<T: Real>(&self, cols: &[T], gx: &mut [T]) {
        self.for_each_tap(|col, xi| gx[xi] += cols[col]);
    }
}

fn dw_geom<T: Real>(w: &Tensor<T>, c: usize, h: usize, wd: usize, pad: usize) -> Result<(usize, usize, usize)> {
    let (wc, one, k, k2) = w.dims4("depthwise_conv2d")?;
    if wc != c || one != 1 || k != k2 || h + 2 * pad < k || wd + 2 * pad < k {
        return shape_err(
            "depthwise_conv2d",
            format!("weight {:?} for {c} channels of {h}x{wd}", w.shape()),
        );
    }
    Ok((k, h + 2 * pad - k + 1, wd + 2 * pad - k + 1))
}

/// Enumerates contiguous row segments of a stride-1 depthwise tap:
/// `f(ki, kj, out_row, in_row, out_col0, in_col0, len)`.
fn dw_taps(
    k: usize,
    pad: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize),
) {
    let pad = pad as isize;
    for ki in 0..k {
        for kj in 0..k {
            let dj = kj as isize - pad;
            let ow0 = (-dj).max(0) as usize;
            let ow1 = ((w as isize - dj).min(wo as isize)).max(0) as usize;
            if ow1 <= ow0 {
                continue;
            }
            for oh in 0..ho {
                let ih = oh as isize + ki as isize - pad;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                f(ki, kj, oh, ih as usize, ow0, (ow0 as isize + dj) as usize, ow1 - ow0);
            }
        }
    }
}

/// Pixel shuffle between `(N, C·r², H, W)` (`lo`) and `(N, C, H·r, W·r)` (`hi`).
/// `unshuffle = false` maps lo→hi, `true` maps hi→lo. `h`, `w` are the low-res sizes.
#[allow(clippy::too_many_arguments)]
fn shuffle<T: Real>(src: &[T], dst: &mut [T], n: usize, c: usize, h: usize, w: usize, r: usize, unshuffle: bool) {
    let (hr, wr) = (h * r, w * r);
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let lc = (ni * c + ci) * r * r + i * r + j;
                    for hh in 0..h {
                        for ww in 0..w {
                            let lo = (lc * h + hh) * w + ww;
                            let hi = ((ni * c + ci) * hr + hh * r + i) * wr + ww * r + j;
                            if unshuffle {
                                dst[lo] = src[hi];
                            } else {
                                dst[hi] = src[lo];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| (i as f64 * 0.731).sin())
    }

    #[test]
    fn layer_norm_of_constant_channels_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::<f64>::full(&[2, 4, 3, 3], 0.37), true);
        let y = t.layer_norm(x, 1e-6).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn l1_of_identical_inputs_is_zero_with_zero_grad() {
        let mut t = Tape::new();
        let a = t.leaf(ramp(&[1, 2, 4, 4]), true);
        let b = t.leaf(ramp(&[1, 2, 4, 4]), true);
        let l = t.l1_loss(a, b).unwrap();
        assert_eq!(t.value(l).data(), &[0.0]);
        let g = t.backward(l).unwrap();
        assert!(g.get(a).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_identity_cases_add_no_node() {
        let mut t = Tape::new();
        let x = t.leaf(ramp(&[2, 3]), true);
        assert_eq!(t.dropout(x, 0.2, false, 1).unwrap(), x);
        assert_eq!(t.dropout(x, 0.0, true, 1).unwrap(), x);
        assert!(t.dropout(x, 1.0, true, 1).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::<f64>::full(&[1, 100_000], 1.0), false);
        let y = t.dropout(x, 0.2, true, 42).unwrap();
        let mean = t.value(y).data().iter().sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        // same seed, same mask
        let z = t.dropout(x, 0.2, true, 42).unwrap();
        assert_eq!(t.value(y), t.value(z));
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut t = Tape::new();
        let a = t.leaf(ramp(&[1, 2, 4, 4]), false);
        let b = t.leaf(ramp(&[1, 3, 4, 4]), false);
        let err = t.add(a, b).unwrap_err();
        assert!(err.to_string().starts_with("add: shape mismatch"), "{err}");
        let w = t.leaf(ramp(&[4, 3, 3, 3]), false);
        assert!(matches!(
            t.conv2d(a, w, None, 1, 1),
            Err(Error::Shape { op: "conv2d", .. })
        ));
    }

    #[test]
    fn backward_is_repeatable() {
        let mut t = Tape::new();
        let x = t.leaf(ramp(&[1, 4, 4, 4]), true);
        let s = t.silu(x).unwrap();
        let m = t.mul(s, x).unwrap();
        let l = t.sum(m).unwrap();
        let g1 = t.backward(l).unwrap().get(x).unwrap().to_vec();
        let g2 = t.backward(l).unwrap().get(x).unwrap().to_vec();
        assert_eq!(g1, g2);
    }

    #[test]
    fn conv_matches_direct_definition() {
        let (n, ci, h, w, co, k, s, p) = (2, 3, 7, 6, 4, 3, 2, 1);
        let x = ramp(&[n, ci, h, w]);
        let wt = Tensor::from_fn(&[co, ci, k, k], |i| (i as f64 * 0.37).cos());
        let mut t = Tape::new();
        let (xv, wv) = (t.leaf(x.clone(), false), t.leaf(wt.clone(), false));
        let y = t.conv2d(xv, wv, None, s, p).unwrap();
        let (_, _, ho, wo) = t.value(y).dims4("test").unwrap();
        for ni in 0..n {
            for o in 0..co {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let (ih, iw) =
                                        ((oh * s + ki) as isize - p as isize, (ow * s + kj) as isize - p as isize);
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                        acc += wt.data()[((o * ci + c) * k + ki) * k + kj]
                                            * x.data()[((ni * ci + c) * h + ih as usize) * w + iw as usize];
                                    }
                                }
                            }
                        }
                        let got = t.value(y).data()[((ni * co + o) * ho + oh) * wo + ow];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn pixel_shuffle_inverts_unshuffle(n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5, r in 1usize..4) {
            let x = Tensor::<f32>::from_fn(&[n, c, h * r, w * r], |i| i as f32);
            let mut t = Tape::new();
            let v = t.leaf(x.clone(), false);
            let u = t.pixel_unshuffle(v, r).unwrap();
            let s = t.pixel_shuffle(u, r).unwrap();
            prop_assert_eq!(t.value(s), &x);
        }
    }
}
