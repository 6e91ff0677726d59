//! Tape-based reverse-mode differentiation over the closed op set used
//! by the spectral bank, the matcher, and the losses.
//!
//! One tape records one forward pass; `backward` walks it once in
//! reverse and accumulates gradients into a [`ParamStore`]. The op set
//! is fixed: elementwise math with size-1 broadcasting, reductions,
//! softmax, convolutions, bilinear resize, grid shifts, the FFT band
//! filter, pooling, and a weighted NLL head. Quantiles enter the tape
//! as stop-gradient constants.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::fft::{duplication_weight, irfft2, rfft2, HalfSpectrum};
use crate::tensor::{self, quantile, sample_coords, strides_of, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
}

/// Named parameter store with grads and SGD momentum buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    velocity: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> usize {
        assert!(!self.index.contains_key(name), "duplicate param {}", name);
        let grad = Tensor::zeros(value.shape());
        self.velocity.push(Tensor::zeros(value.shape()));
        self.params.push(Param { name: name.to_string(), value, grad: grad.clone(), frozen: false });
        let i = self.params.len() - 1;
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn idx(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Param {
        &self.params[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        let i = self.index[name];
        &mut self.params[i]
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        self.get_mut(name).frozen = frozen;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Momentum SGD with weight decay: v <- m v + (g + wd p); p <- p - lr v.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        for (p, vel) in self.params.iter_mut().zip(self.velocity.iter_mut()) {
            if p.frozen {
                continue;
            }
            for i in 0..p.value.len() {
                let g = p.grad.data()[i] + weight_decay * p.value.data()[i];
                let v = momentum * vel.data()[i] + g;
                vel.data_mut()[i] = v;
                p.value.data_mut()[i] -= lr * v;
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { param: Option<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    LnClamped(Var),
    SqrtGuarded(Var),
    ClampMin(Var, f64),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    SoftmaxAxis(Var, usize),
    Reshape(Var),
    Select { x: Var, axis: usize, idx: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Shift2d { x: Var, dy: isize, dx: isize },
    Conv1x1 { x: Var, w: Var, b: Var },
    Conv3x3 { x: Var, w: Var, b: Var, stride: usize },
    ResizeBilinear { x: Var },
    BandFilter { x: Var, masks: Var, width: usize, spec: HalfSpectrum },
    NllWeighted { pred: Var, labels: Tensor, w: [f64; 2], n_valid: usize },
    Pool { x: Var, k: usize, is_max: bool, argidx: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Quantile values recorded on a forward pass so perturbed re-runs can
/// replay them (stop-gradient finite differences).
#[derive(Clone, Debug)]
pub struct TauCache {
    replaying: bool,
    values: Vec<f64>,
    cursor: usize,
}

impl TauCache {
    pub fn recording() -> Self {
        TauCache { replaying: false, values: Vec::new(), cursor: 0 }
    }

    pub fn replay(&self) -> Self {
        TauCache { replaying: true, values: self.values.clone(), cursor: 0 }
    }

    fn next(&mut self, compute: impl FnOnce() -> f64) -> f64 {
        if self.replaying {
            let v = self.values[self.cursor];
            self.cursor += 1;
            v
        } else {
            let v = compute();
            self.values.push(v);
            v
        }
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_vars: HashMap::new(), backward_done: false }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite value on tape: {:?}", op_name(&op));
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None })
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Bind a store parameter as a leaf. Repeated binds of the same
    /// parameter return the same node, so shared weights are one object.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        let i = store.idx(name).unwrap_or_else(|| panic!("unknown param {}", name));
        if let Some(&v) = self.param_vars.get(&i) {
            return v;
        }
        let v = self.push(store.params[i].value.clone(), Op::Leaf { param: Some(i) });
        self.param_vars.insert(i, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b)).unwrap();
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b)).unwrap();
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).mul(self.value(b)).unwrap();
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).div(self.value(b)).unwrap();
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(tensor::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(tensor::softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// ln(max(x, 1e-12))
    pub fn ln_clamped(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(1e-12).ln());
        self.push(v, Op::LnClamped(a))
    }

    pub fn sqrt_guarded(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0).sqrt());
        self.push(v, Op::SqrtGuarded(a))
    }

    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x.max(c));
        self.push(v, Op::ClampMin(a, c))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let v = Tensor::scalar(self.value(a).sum() / n);
        self.push(v, Op::MeanAll(a))
    }

    /// Sum over one axis, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let v = self.value(a).sum_axis(axis);
        self.push(v, Op::SumAxis(a, axis))
    }

    pub fn softmax_axis(&mut self, a: Var, axis: usize) -> Var {
        let x = self.value(a);
        let v = softmax_axis_fwd(x, axis);
        self.push(v, Op::SoftmaxAxis(a, axis))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).reshape(shape).unwrap();
        self.push(v, Op::Reshape(a))
    }

    /// Narrow `axis` to the single index `idx` (kept as size 1).
    pub fn select(&mut self, a: Var, axis: usize, idx: usize) -> Var {
        let x = self.value(a);
        let v = select_fwd(x, axis, idx);
        self.push(v, Op::Select { x: a, axis, idx })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        let tensors: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let v = concat_fwd(&tensors, axis);
        self.push(v, Op::Concat { xs: xs.to_vec(), axis })
    }

    /// out(.., i, j) = x(.., i+dy, j+dx) where in bounds, else 0.
    pub fn shift2d(&mut self, a: Var, dy: isize, dx: isize) -> Var {
        let v = shift2d_fwd(self.value(a), dy, dx);
        self.push(v, Op::Shift2d { x: a, dy, dx })
    }

    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Var {
        let v = tensor::conv1x1(self.value(x), self.value(w), self.value(b)).unwrap();
        self.push(v, Op::Conv1x1 { x, w, b })
    }

    /// 3x3 convolution, zero padding 1, stride 1 or 2.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let v = conv3x3_fwd(self.value(x), self.value(w), self.value(b), stride);
        self.push(v, Op::Conv3x3 { x, w, b, stride })
    }

    /// Bilinear resize of the last two dims (half-pixel centers).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let v = tensor::resize_bilinear(self.value(x), out_h, out_w).unwrap();
        self.push(v, Op::ResizeBilinear { x })
    }

    /// Band-restricted inverse transforms: x [B,C,h,w] with masks
    /// [K,h,w_r] over the half spectrum -> [B,C,K,h,w].
    pub fn band_filter(&mut self, x: Var, masks: Var) -> Var {
        let xt = self.value(x).clone();
        let mt = self.value(masks).clone();
        let (bsz, c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2], xt.shape()[3]);
        let k = mt.shape()[0];
        let w_r = w / 2 + 1;
        assert_eq!(mt.shape(), &[k, h, w_r], "band mask grid mismatch");
        let spec = rfft2(&xt).unwrap();
        let mut out = Tensor::zeros(&[bsz, c, k, h, w]);
        for ki in 0..k {
            let mut masked = spec.clone();
            for p in 0..bsz * c {
                let base = p * h * w_r;
                for i in 0..h * w_r {
                    let m = mt.data()[ki * h * w_r + i];
                    masked.re[base + i] *= m;
                    masked.im[base + i] *= m;
                }
            }
            let band = irfft2(&masked, w).unwrap();
            for b in 0..bsz {
                for ci in 0..c {
                    let src = (b * c + ci) * h * w;
                    let dst = (((b * c) + ci) * k + ki) * h * w;
                    out.data_mut()[dst..dst + h * w]
                        .copy_from_slice(&band.data()[src..src + h * w]);
                }
            }
        }
        self.push(out, Op::BandFilter { x, masks, width: w, spec })
    }

    /// Per-sample quantile of a [B,1,h,w] map, entered as a
    /// stop-gradient constant of shape [B,1,1,1].
    pub fn quantile_sg(&mut self, x: Var, q: f64, cache: &mut TauCache) -> Var {
        let t = self.value(x);
        let (b, hw) = (t.shape()[0], t.len() / t.shape()[0]);
        let mut vals = Vec::with_capacity(b);
        for bi in 0..b {
            let slice = &t.data()[bi * hw..(bi + 1) * hw];
            vals.push(cache.next(|| quantile(slice, q).unwrap()));
        }
        self.constant(Tensor::new(vec![b, 1, 1, 1], vals).unwrap())
    }

    /// Class-weighted NLL over non-ignore pixels. `pred` is [B,2,H,W]
    /// probabilities, `labels` holds {0,1,255}.
    pub fn nll_weighted(&mut self, pred: Var, labels: &Tensor, w: [f64; 2]) -> Var {
        let p = self.value(pred);
        let (b, hh, ww) = (p.shape()[0], p.shape()[2], p.shape()[3]);
        assert_eq!(labels.shape(), &[b, hh, ww]);
        let hw = hh * ww;
        let mut n_valid = 0usize;
        let mut acc = 0.0;
        for bi in 0..b {
            for pix in 0..hw {
                let y = labels.data()[bi * hw + pix];
                if y == 255.0 {
                    continue;
                }
                let yi = y as usize;
                n_valid += 1;
                let pr = p.data()[(bi * 2 + yi) * hw + pix].max(1e-12);
                acc -= w[yi] * pr.ln();
            }
        }
        let loss = if n_valid == 0 { 0.0 } else { acc / n_valid as f64 };
        self.push(
            Tensor::scalar(loss),
            Op::NllWeighted { pred, labels: labels.clone(), w, n_valid },
        )
    }

    /// k x k max pooling, stride 1, replicate padding (grey dilation).
    pub fn max_pool(&mut self, x: Var, k: usize) -> Var {
        let (v, argidx) = pool_fwd(self.value(x), k, true);
        self.push(v, Op::Pool { x, k, is_max: true, argidx })
    }

    /// k x k min pooling, stride 1, replicate padding (grey erosion).
    pub fn min_pool(&mut self, x: Var, k: usize) -> Var {
        let (v, argidx) = pool_fwd(self.value(x), k, false);
        self.push(v, Op::Pool { x, k, is_max: false, argidx })
    }

    /// Stack K same-shaped vars along a new leading axis.
    pub fn stack0(&mut self, xs: &[Var]) -> Var {
        let shape = self.value(xs[0]).shape().to_vec();
        let mut unsq = Vec::with_capacity(xs.len());
        let mut s1 = vec![1usize];
        s1.extend_from_slice(&shape);
        for &x in xs {
            unsq.push(self.reshape(x, &s1));
        }
        self.concat(&unsq, 0)
    }

    /// Reverse pass from a scalar loss; gradients accumulate into the
    /// store's non-frozen params.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autograd("backward called twice on one tape".into()));
        }
        if !self.value(loss).shape().is_empty() && self.value(loss).len() != 1 {
            return Err(Error::Autograd(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // keep param grads around for the leaf sweep below
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                grads[i] = Some(g);
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf { .. } => unreachable!(),
                Op::Add(a, b) => {
                    self.acc(&mut grads, a, g.unbroadcast(self.shape_of(a)));
                    self.acc(&mut grads, b, g.unbroadcast(self.shape_of(b)));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, a, g.unbroadcast(self.shape_of(a)));
                    let gb = g.map(|x| -x).unbroadcast(self.shape_of(b));
                    self.acc(&mut grads, b, gb);
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(b)).unwrap().unbroadcast(self.shape_of(a));
                    let gb = g.mul(self.value(a)).unwrap().unbroadcast(self.shape_of(b));
                    self.acc(&mut grads, a, ga);
                    self.acc(&mut grads, b, gb);
                }
                Op::Div(a, b) => {
                    let bv = self.value(b);
                    let ga = g.div(bv).unwrap().unbroadcast(self.shape_of(a));
                    let num = g.mul(self.value(a)).unwrap();
                    let b2 = bv.mul(bv).unwrap();
                    let gb = num.div(&b2).unwrap().map(|x| -x).unbroadcast(self.shape_of(b));
                    self.acc(&mut grads, a, ga);
                    self.acc(&mut grads, b, gb);
                }
                Op::Neg(a) => self.acc(&mut grads, a, g.map(|x| -x)),
                Op::Scale(a, c) => self.acc(&mut grads, a, g.map(|x| c * x)),
                Op::AddScalar(a, _) => self.acc(&mut grads, a, g),
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let gy = g.binary(y, |gi, yi| gi * yi * (1.0 - yi)).unwrap();
                    self.acc(&mut grads, a, gy);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let gy = g.binary(y, |gi, yi| gi * (1.0 - yi * yi)).unwrap();
                    self.acc(&mut grads, a, gy);
                }
                Op::Softplus(a) => {
                    let x = self.value(a);
                    let gy = g.binary(x, |gi, xi| gi * tensor::sigmoid(xi)).unwrap();
                    self.acc(&mut grads, a, gy);
                }
                Op::Exp(a) => {
                    let y = &self.nodes[i].value;
                    let gy = g.mul(y).unwrap();
                    self.acc(&mut grads, a, gy);
                }
                Op::LnClamped(a) => {
                    let x = self.value(a);
                    let gy = g
                        .binary(x, |gi, xi| if xi > 1e-12 { gi / xi } else { 0.0 })
                        .unwrap();
                    self.acc(&mut grads, a, gy);
                }
                Op::SqrtGuarded(a) => {
                    let y = &self.nodes[i].value;
                    let gy = g.binary(y, |gi, yi| gi * 0.5 / yi.max(1e-12)).unwrap();
                    self.acc(&mut grads, a, gy);
                }
                Op::ClampMin(a, c) => {
                    let x = self.value(a);
                    let gy = g.binary(x, |gi, xi| if xi > c { gi } else { 0.0 }).unwrap();
                    self.acc(&mut grads, a, gy);
                }
                Op::SumAll(a) => {
                    let gv = g.item();
                    self.acc(&mut grads, a, Tensor::full(self.shape_of(a), gv));
                }
                Op::MeanAll(a) => {
                    let n_in = self.value(a).len() as f64;
                    let gv = g.item() / n_in;
                    self.acc(&mut grads, a, Tensor::full(self.shape_of(a), gv));
                }
                Op::SumAxis(a, _) => {
                    let zeros = Tensor::zeros(self.shape_of(a));
                    let gy = g.add(&zeros).unwrap();
                    self.acc(&mut grads, a, gy);
                }
                Op::SoftmaxAxis(a, axis) => {
                    let y = &self.nodes[i].value;
                    let gy = softmax_axis_bwd(y, &g, axis);
                    self.acc(&mut grads, a, gy);
                }
                Op::Reshape(a) => {
                    let gy = g.reshape(self.shape_of(a)).unwrap();
                    self.acc(&mut grads, a, gy);
                }
                Op::Select { x, axis, idx } => {
                    let gy = select_bwd(&g, self.shape_of(x), axis, idx);
                    self.acc(&mut grads, x, gy);
                }
                Op::Concat { xs, axis } => {
                    let shapes: Vec<Vec<usize>> =
                        xs.iter().map(|&v| self.shape_of(v).to_vec()).collect();
                    let parts = concat_bwd(&g, &shapes, axis);
                    for (&x, gx) in xs.iter().zip(parts) {
                        self.acc(&mut grads, x, gx);
                    }
                }
                Op::Shift2d { x, dy, dx } => {
                    let gy = shift2d_fwd(&g, -dy, -dx);
                    self.acc(&mut grads, x, gy);
                }
                Op::Conv1x1 { x, w, b } => {
                    let (gx, gw, gb) = conv1x1_bwd(self.value(x), self.value(w), &g);
                    self.acc(&mut grads, x, gx);
                    self.acc(&mut grads, w, gw);
                    self.acc(&mut grads, b, gb);
                }
                Op::Conv3x3 { x, w, b, stride } => {
                    let (gx, gw, gb) = conv3x3_bwd(self.value(x), self.value(w), &g, stride);
                    self.acc(&mut grads, x, gx);
                    self.acc(&mut grads, w, gw);
                    self.acc(&mut grads, b, gb);
                }
                Op::ResizeBilinear { x } => {
                    let gy = resize_bilinear_bwd(&g, self.shape_of(x));
                    self.acc(&mut grads, x, gy);
                }
                Op::BandFilter { x, masks, width, ref spec } => {
                    let (gx, gm) = band_filter_bwd(&g, self.value(masks), spec, width);
                    self.acc(&mut grads, x, gx);
                    self.acc(&mut grads, masks, gm);
                }
                Op::NllWeighted { pred, ref labels, w, n_valid } => {
                    let gp = nll_bwd(self.value(pred), labels, w, n_valid, g.item());
                    self.acc(&mut grads, pred, gp);
                }
                Op::Pool { x, ref argidx, .. } => {
                    let mut gx = Tensor::zeros(self.shape_of(x));
                    for (o, &src) in argidx.iter().enumerate() {
                        gx.data_mut()[src] += g.data()[o];
                    }
                    self.acc(&mut grads, x, gx);
                }
            }
        }

        // sweep leaves into the store
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pi) } = node.op {
                if let Some(g) = &grads[i] {
                    if !store.params[pi].frozen {
                        let acc = store.params[pi].grad.add(g).unwrap();
                        store.params[pi].grad = acc;
                    }
                }
            }
        }
        Ok(())
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        debug_assert_eq!(g.shape(), self.shape_of(v));
        match &mut grads[v.0] {
            Some(cur) => *cur = cur.add(&g).unwrap(),
            slot => *slot = Some(g),
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Neg(..) => "neg",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::Softplus(..) => "softplus",
        Op::Exp(..) => "exp",
        Op::LnClamped(..) => "ln",
        Op::SqrtGuarded(..) => "sqrt",
        Op::ClampMin(..) => "clamp_min",
        Op::SumAll(..) => "sum",
        Op::MeanAll(..) => "mean",
        Op::SumAxis(..) => "sum_axis",
        Op::SoftmaxAxis(..) => "softmax",
        Op::Reshape(..) => "reshape",
        Op::Select { .. } => "select",
        Op::Concat { .. } => "concat",
        Op::Shift2d { .. } => "shift2d",
        Op::Conv1x1 { .. } => "conv1x1",
        Op::Conv3x3 { .. } => "conv3x3",
        Op::ResizeBilinear { .. } => "resize",
        Op::BandFilter { .. } => "band_filter",
        Op::NllWeighted { .. } => "nll",
        Op::Pool { .. } => "pool",
    }
}

fn softmax_axis_fwd(x: &Tensor, axis: usize) -> Tensor {
    let st = x.strides();
    let k = x.shape()[axis];
    let stride = st[axis];
    let mut out = x.clone();
    for_each_lane(x.shape(), axis, |base| {
        let mut m = f64::NEG_INFINITY;
        for j in 0..k {
            m = m.max(x.data()[base + j * stride]);
        }
        let mut sum = 0.0;
        for j in 0..k {
            let e = (x.data()[base + j * stride] - m).exp();
            out.data_mut()[base + j * stride] = e;
            sum += e;
        }
        for j in 0..k {
            out.data_mut()[base + j * stride] /= sum;
        }
    });
    out
}

fn softmax_axis_bwd(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let st = y.strides();
    let k = y.shape()[axis];
    let stride = st[axis];
    let mut gx = Tensor::zeros(y.shape());
    for_each_lane(y.shape(), axis, |base| {
        let mut dot = 0.0;
        for j in 0..k {
            let o = base + j * stride;
            dot += g.data()[o] * y.data()[o];
        }
        for j in 0..k {
            let o = base + j * stride;
            gx.data_mut()[o] = y.data()[o] * (g.data()[o] - dot);
        }
    });
    gx
}

/// Visit the base offset of every lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize)) {
    let st = strides_of(shape);
    let total: usize = shape.iter().product();
    let k = shape[axis];
    let lanes = total / k;
    for lane in 0..lanes {
        // decompose lane index over all dims except `axis`
        let mut rem = lane;
        let mut base = 0;
        for d in (0..shape.len()).rev() {
            if d == axis {
                continue;
            }
            let idx = rem % shape[d];
            rem /= shape[d];
            base += idx * st[d];
        }
        f(base);
    }
}

fn select_fwd(x: &Tensor, axis: usize, idx: usize) -> Tensor {
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = 1;
    let st = x.strides();
    let mut out = Tensor::zeros(&out_shape);
    let ost = out.strides();
    let n = out.len();
    for flat in 0..n {
        let mut rem = flat;
        let mut src = 0;
        for d in 0..out_shape.len() {
            let i = rem / ost[d];
            rem %= ost[d];
            let si = if d == axis { idx } else { i };
            src += si * st[d];
        }
        out.data_mut()[flat] = x.data()[src];
    }
    out
}

fn select_bwd(g: &Tensor, in_shape: &[usize], axis: usize, idx: usize) -> Tensor {
    let mut gx = Tensor::zeros(in_shape);
    let st = gx.strides();
    let gst = g.strides();
    for flat in 0..g.len() {
        let mut rem = flat;
        let mut dst = 0;
        for d in 0..in_shape.len() {
            let i = rem / gst[d];
            rem %= gst[d];
            let di = if d == axis { idx } else { i };
            dst += di * st[d];
        }
        gx.data_mut()[dst] += g.data()[flat];
    }
    gx
}

fn concat_fwd(xs: &[&Tensor], axis: usize) -> Tensor {
    let mut out_shape = xs[0].shape().to_vec();
    out_shape[axis] = xs.iter().map(|t| t.shape()[axis]).sum();
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = Tensor::zeros(&out_shape);
    let total_ax = out_shape[axis];
    let mut offset = 0;
    for t in xs {
        let ax = t.shape()[axis];
        for o in 0..outer {
            for a in 0..ax {
                let src = (o * ax + a) * inner;
                let dst = (o * total_ax + offset + a) * inner;
                out.data_mut()[dst..dst + inner].copy_from_slice(&t.data()[src..src + inner]);
            }
        }
        offset += ax;
    }
    out
}

fn concat_bwd(g: &Tensor, shapes: &[Vec<usize>], axis: usize) -> Vec<Tensor> {
    let outer: usize = shapes[0][..axis].iter().product();
    let inner: usize = shapes[0][axis + 1..].iter().product();
    let total_ax = g.shape()[axis];
    let mut parts = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for sh in shapes {
        let ax = sh[axis];
        let mut part = Tensor::zeros(sh);
        for o in 0..outer {
            for a in 0..ax {
                let dst = (o * ax + a) * inner;
                let src = (o * total_ax + offset + a) * inner;
                part.data_mut()[dst..dst + inner].copy_from_slice(&g.data()[src..src + inner]);
            }
        }
        offset += ax;
        parts.push(part);
    }
    parts
}

fn shift2d_fwd(x: &Tensor, dy: isize, dx: isize) -> Tensor {
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2] as isize, x.shape()[r - 1] as isize);
    let batch: usize = x.shape()[..r - 2].iter().product();
    let plane = (h * w) as usize;
    let mut out = Tensor::zeros(x.shape());
    for b in 0..batch {
        let base = b * plane;
        for i in 0..h {
            let si = i + dy;
            if si < 0 || si >= h {
                continue;
            }
            for j in 0..w {
                let sj = j + dx;
                if sj < 0 || sj >= w {
                    continue;
                }
                out.data_mut()[base + (i * w + j) as usize] =
                    x.data()[base + (si * w + sj) as usize];
            }
        }
    }
    out
}

fn conv1x1_bwd(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (bs, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = w.shape()[0];
    let hw = h * wd;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[co]);
    for b in 0..bs {
        for oc in 0..co {
            let gbase = (b * co + oc) * hw;
            for p in 0..hw {
                let gv = g.data()[gbase + p];
                gb.data_mut()[oc] += gv;
                for icn in 0..ci {
                    gx.data_mut()[(b * ci + icn) * hw + p] += w.data()[oc * ci + icn] * gv;
                    gw.data_mut()[oc * ci + icn] += x.data()[(b * ci + icn) * hw + p] * gv;
                }
            }
        }
    }
    (gx, gw, gb)
}

fn conv3x3_fwd(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let (bs, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = w.shape()[0];
    assert_eq!(w.shape(), &[co, ci, 3, 3]);
    let oh = (h + 2 - 3) / stride + 1;
    let ow = (wd + 2 - 3) / stride + 1;
    let mut out = Tensor::zeros(&[bs, co, oh, ow]);
    for bi in 0..bs {
        for oc in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[oc];
                    for icn in 0..ci {
                        for ky in 0..3 {
                            let iy = (oy * stride + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (ox * stride + kx) as isize - 1;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((oc * ci + icn) * 3 + ky) * 3 + kx]
                                    * x.data()
                                        [(bi * ci + icn) * h * wd + iy as usize * wd + ix as usize];
                            }
                        }
                    }
                    out.data_mut()[(bi * co + oc) * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn conv3x3_bwd(x: &Tensor, w: &Tensor, g: &Tensor, stride: usize) -> (Tensor, Tensor, Tensor) {
    let (bs, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = w.shape()[0];
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[co]);
    for bi in 0..bs {
        for oc in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g.data()[(bi * co + oc) * oh * ow + oy * ow + ox];
                    gb.data_mut()[oc] += gv;
                    for icn in 0..ci {
                        for ky in 0..3 {
                            let iy = (oy * stride + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (ox * stride + kx) as isize - 1;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = (bi * ci + icn) * h * wd
                                    + iy as usize * wd
                                    + ix as usize;
                                let wi = ((oc * ci + icn) * 3 + ky) * 3 + kx;
                                gx.data_mut()[xi] += w.data()[wi] * gv;
                                gw.data_mut()[wi] += x.data()[xi] * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

fn resize_bilinear_bwd(g: &Tensor, in_shape: &[usize]) -> Tensor {
    let r = in_shape.len();
    let (in_h, in_w) = (in_shape[r - 2], in_shape[r - 1]);
    let (out_h, out_w) = (g.shape()[r - 2], g.shape()[r - 1]);
    if in_h == out_h && in_w == out_w {
        return g.clone();
    }
    let batch: usize = in_shape[..r - 2].iter().product();
    let mut gx = Tensor::zeros(in_shape);
    for b in 0..batch {
        let sbase = b * in_h * in_w;
        let obase = b * out_h * out_w;
        for oy in 0..out_h {
            let (y0, y1, fy) = sample_coords(oy, out_h, in_h);
            for ox in 0..out_w {
                let (x0, x1, fx) = sample_coords(ox, out_w, in_w);
                let gv = g.data()[obase + oy * out_w + ox];
                gx.data_mut()[sbase + y0 * in_w + x0] += gv * (1.0 - fx) * (1.0 - fy);
                gx.data_mut()[sbase + y0 * in_w + x1] += gv * fx * (1.0 - fy);
                gx.data_mut()[sbase + y1 * in_w + x0] += gv * (1.0 - fx) * fy;
                gx.data_mut()[sbase + y1 * in_w + x1] += gv * fx * fy;
            }
        }
    }
    gx
}

fn band_filter_bwd(
    g: &Tensor,
    masks: &Tensor,
    spec: &HalfSpectrum,
    width: usize,
) -> (Tensor, Tensor) {
    let (bsz, c, k, h, w) = (
        g.shape()[0],
        g.shape()[1],
        g.shape()[2],
        g.shape()[3],
        g.shape()[4],
    );
    debug_assert_eq!(w, width);
    let w_r = w / 2 + 1;
    let mut gx = Tensor::zeros(&[bsz, c, h, w]);
    let mut gm = Tensor::zeros(masks.shape());
    for ki in 0..k {
        // collect grad of band ki as a [B,C,h,w] tensor
        let mut gk = Tensor::zeros(&[bsz, c, h, w]);
        for b in 0..bsz {
            for ci in 0..c {
                let src = (((b * c) + ci) * k + ki) * h * w;
                let dst = (b * c + ci) * h * w;
                gk.data_mut()[dst..dst + h * w].copy_from_slice(&g.data()[src..src + h * w]);
            }
        }
        let gspec = rfft2(&gk).unwrap();
        // grad wrt x: same linear filter applied to the output grad
        let mut masked = gspec.clone();
        for p in 0..bsz * c {
            let base = p * h * w_r;
            for i in 0..h * w_r {
                let m = masks.data()[ki * h * w_r + i];
                masked.re[base + i] *= m;
                masked.im[base + i] *= m;
            }
        }
        let gxk = irfft2(&masked, w).unwrap();
        for (a, b) in gx.data_mut().iter_mut().zip(gxk.data()) {
            *a += b;
        }
        // grad wrt the mask: real part of <G, X> per bin with
        // conjugate-pair duplication
        for p in 0..bsz * c {
            let base = p * h * w_r;
            for u in 0..h {
                for v in 0..w_r {
                    let i = base + u * w_r + v;
                    let dot = gspec.re[i] * spec.re[i] + gspec.im[i] * spec.im[i];
                    gm.data_mut()[ki * h * w_r + u * w_r + v] +=
                        duplication_weight(v, w) * dot;
                }
            }
        }
    }
    (gx, gm)
}

fn nll_bwd(pred: &Tensor, labels: &Tensor, w: [f64; 2], n_valid: usize, gout: f64) -> Tensor {
    let mut gp = Tensor::zeros(pred.shape());
    if n_valid == 0 {
        return gp;
    }
    let (b, hh, ww) = (pred.shape()[0], pred.shape()[2], pred.shape()[3]);
    let hw = hh * ww;
    let scale = gout / n_valid as f64;
    for bi in 0..b {
        for pix in 0..hw {
            let y = labels.data()[bi * hw + pix];
            if y == 255.0 {
                continue;
            }
            let yi = y as usize;
            let p = pred.data()[(bi * 2 + yi) * hw + pix];
            if p > 1e-12 {
                gp.data_mut()[(bi * 2 + yi) * hw + pix] -= scale * w[yi] / p;
            }
        }
    }
    gp
}

fn pool_fwd(x: &Tensor, k: usize, is_max: bool) -> (Tensor, Vec<usize>) {
    assert!(k % 2 == 1, "pool window must be odd");
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let batch: usize = x.shape()[..r - 2].iter().product();
    let half = (k / 2) as isize;
    let mut out = Tensor::zeros(x.shape());
    let mut argidx = vec![0usize; x.len()];
    for b in 0..batch {
        let base = b * h * w;
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut best = if is_max { f64::NEG_INFINITY } else { f64::INFINITY };
                let mut best_idx = 0usize;
                for dy in -half..=half {
                    // replicate padding: clamp to the border
                    let si = (i + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -half..=half {
                        let sj = (j + dx).clamp(0, w as isize - 1) as usize;
                        let v = x.data()[base + si * w + sj];
                        let better = if is_max { v > best } else { v < best };
                        if better {
                            best = v;
                            best_idx = base + si * w + sj;
                        }
                    }
                }
                let o = base + (i as usize) * w + j as usize;
                out.data_mut()[o] = best;
                argidx[o] = best_idx;
            }
        }
    }
    (out, argidx)
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub frozen: bool,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| !e.frozen)
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (1e-8f64).max(a.abs() + n.abs())
}

/// Compare analytic gradients of a scalar forward against central
/// finite differences, per parameter element.
///
/// The forward closure must rebuild the whole graph from the store on
/// every call. When `freeze_tau` is set, the quantiles recorded on the
/// baseline pass are replayed during the perturbed evaluations so the
/// differences respect stop-gradient semantics.
pub fn gradcheck(
    mut forward: impl FnMut(&mut Tape, &ParamStore, &mut TauCache) -> Result<Var>,
    store: &mut ParamStore,
    eps: f64,
    freeze_tau: bool,
) -> Result<GradcheckReport> {
    assert!(eps > 0.0);
    store.zero_grads();
    let mut base_cache = TauCache::recording();
    let mut tape = Tape::new();
    let loss = forward(&mut tape, store, &mut base_cache)?;
    let base_value = tape.value(loss).item();
    tape.backward(loss, store)?;
    let analytic: Vec<Tensor> = store.params.iter().map(|p| p.grad.clone()).collect();

    // determinism check: a second untouched evaluation must agree bitwise
    {
        let mut cache2 = TauCache::recording();
        let mut tape2 = Tape::new();
        let loss2 = forward(&mut tape2, store, &mut cache2)?;
        if tape2.value(loss2).item() != base_value {
            return Err(Error::Autograd(
                "gradcheck: forward is not deterministic (baseline evals differ)".into(),
            ));
        }
    }

    let names = store.names();
    let mut entries = Vec::with_capacity(names.len());
    for (pi, name) in names.iter().enumerate() {
        if store.params[pi].frozen {
            entries.push(GradcheckEntry { name: name.clone(), max_rel_err: 0.0, frozen: true });
            continue;
        }
        let n_elems = store.params[pi].value.len();
        let mut worst = 0.0f64;
        for ei in 0..n_elems {
            let orig = store.params[pi].value.data()[ei];
            let mut eval = |v: f64, store: &mut ParamStore| -> Result<f64> {
                store.params[pi].value.data_mut()[ei] = v;
                let mut cache =
                    if freeze_tau { base_cache.replay() } else { TauCache::recording() };
                let mut t = Tape::new();
                let l = forward(&mut t, store, &mut cache)?;
                Ok(t.value(l).item())
            };
            let fp = eval(orig + eps, store)?;
            let fm = eval(orig - eps, store)?;
            store.params[pi].value.data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi].data()[ei];
            worst = worst.max(rel_err(a, numeric));
        }
        entries.push(GradcheckEntry { name: name.clone(), max_rel_err: worst, frozen: false });
    }
    Ok(GradcheckReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn square_of_scalar() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let p = tape.param(&store, "p");
        let loss = tape.mul(p, p);
        tape.backward(loss, &mut store).unwrap();
        assert!((store.get("p").grad.item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn sin_via_gradcheck() {
        // f = sin(p) built from primitives: use tanh as a stand-in? No:
        // check a composite p^3 + sigmoid(p) against FD instead.
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(0.3));
        let report = gradcheck(
            |tape, store, _| {
                let p = tape.param(store, "p");
                let p2 = tape.mul(p, p);
                let p3 = tape.mul(p2, p);
                let s = tape.sigmoid(p);
                Ok(tape.add(p3, s))
            },
            &mut store,
            1e-5,
            false,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-8, "{:?}", report);
    }

    #[test]
    fn frozen_param_gets_no_grad() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(2.0));
        store.set_frozen("p", true);
        let mut tape = Tape::new();
        let p = tape.param(&store, "p");
        let loss = tape.mul(p, p);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get("p").grad.item(), 0.0);

        let report = gradcheck(
            |tape, store, _| {
                let p = tape.param(store, "p");
                Ok(tape.mul(p, p))
            },
            &mut store,
            1e-5,
            false,
        )
        .unwrap();
        assert!(report.entries[0].frozen);
        assert_eq!(report.entries[0].max_rel_err, 0.0);
    }

    #[test]
    fn stop_gradient_through_quantile() {
        let mut store = ParamStore::new();
        store.add("p", rnd(&[1, 1, 4, 4], 3));
        let mut tape = Tape::new();
        let p = tape.param(&store, "p");
        let mut cache = TauCache::recording();
        let tau = tape.quantile_sg(p, 0.85, &mut cache);
        // loss depends on p only through tau
        let loss0 = tape.mul(tau, tau);
        let loss = tape.sum_all(loss0);
        tape.backward(loss, &mut store).unwrap();
        assert!(store.get("p").grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_twice_errors_and_nonscalar_loss_errors() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(1.0));
        let mut tape = Tape::new();
        let p = tape.param(&store, "p");
        let loss = tape.mul(p, p);
        tape.backward(loss, &mut store).unwrap();
        assert!(tape.backward(loss, &mut store).is_err());

        let mut tape = Tape::new();
        store.add("v", rnd(&[3], 1));
        let v = tape.param(&store, "v");
        let y = tape.mul(v, v);
        assert!(tape.backward(y, &mut store).is_err());
    }

    #[test]
    fn sgd_momentum_two_step_hand_computed() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(1.0));
        // step 1: g=0.5  v=0.5  p=1-0.1*0.5=0.95
        store.get_mut("p").grad = Tensor::scalar(0.5);
        store.sgd_step(0.1, 0.9, 0.0);
        assert!((store.get("p").value.item() - 0.95).abs() < 1e-12);
        // step 2: g=0.2  v=0.9*0.5+0.2=0.65  p=0.95-0.065=0.885
        store.get_mut("p").grad = Tensor::scalar(0.2);
        store.sgd_step(0.1, 0.9, 0.0);
        assert!((store.get("p").value.item() - 0.885).abs() < 1e-12);
        // lr=0 -> no change
        store.get_mut("p").grad = Tensor::scalar(5.0);
        store.sgd_step(0.0, 0.9, 0.0);
        assert!((store.get("p").value.item() - 0.885).abs() < 1e-12);
    }

    #[test]
    fn zero_grads_is_clean_across_episodes() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(2.0));
        let mut first = None;
        for _ in 0..3 {
            store.zero_grads();
            let mut tape = Tape::new();
            let p = tape.param(&store, "p");
            let loss = tape.mul(p, p);
            tape.backward(loss, &mut store).unwrap();
            let g = store.get("p").grad.item();
            match first {
                None => first = Some(g),
                Some(f) => assert_eq!(f, g),
            }
        }
    }

    /// FD-check every composite op through a fixed random projection.
    #[test]
    fn op_suite_matches_finite_differences() {
        let proj = rnd(&[1, 2, 3, 5, 4], 99);
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Var>)> = vec![
            ("sigmoid", Box::new(|t: &mut Tape, x| t.sigmoid(x))),
            ("tanh", Box::new(|t: &mut Tape, x| t.tanh(x))),
            ("softplus", Box::new(|t: &mut Tape, x| t.softplus(x))),
            ("exp", Box::new(|t: &mut Tape, x| t.exp(x))),
            ("softmax1", Box::new(|t: &mut Tape, x| t.softmax_axis(x, 1))),
            ("shift", Box::new(|t: &mut Tape, x| t.shift2d(x, -1, 1))),
            ("select", Box::new(|t: &mut Tape, x| t.select(x, 1, 1))),
            ("resize_up", Box::new(|t: &mut Tape, x| t.resize_bilinear(x, 7, 5))),
            ("resize_dn", Box::new(|t: &mut Tape, x| t.resize_bilinear(x, 2, 2))),
            ("maxpool", Box::new(|t: &mut Tape, x| t.max_pool(x, 3))),
            ("minpool", Box::new(|t: &mut Tape, x| t.min_pool(x, 3))),
            ("sumaxis", Box::new(|t: &mut Tape, x| t.sum_axis(x, 1))),
        ];
        for (name, build) in cases {
            let mut store = ParamStore::new();
            store.add("x", rnd(&[1, 2, 4, 3], 5));
            let report = gradcheck(
                |tape, store, _| {
                    let x = tape.param(store, "x");
                    let y = build(tape, x);
                    // project to scalar with op-appropriate weights
                    let n = tape.value(y).len();
                    let w = tape.constant(
                        Tensor::new(tape.value(y).shape().to_vec(), proj.data()[..n].to_vec())
                            .unwrap(),
                    );
                    let p = tape.mul(y, w);
                    Ok(tape.sum_all(p))
                },
                &mut store,
                1e-6,
                false,
            )
            .unwrap();
            assert!(report.max_rel_err() < 1e-6, "op {} failed: {:?}", name, report);
        }
    }

    #[test]
    fn conv_ops_match_finite_differences() {
        for stride in [1usize, 2] {
            let mut store = ParamStore::new();
            store.add("x", rnd(&[1, 2, 5, 5], 11));
            store.add("w", rnd(&[3, 2, 3, 3], 12));
            store.add("b", rnd(&[3], 13));
            let report = gradcheck(
                |tape, store, _| {
                    let x = tape.param(store, "x");
                    let w = tape.param(store, "w");
                    let b = tape.param(store, "b");
                    let y = tape.conv3x3(x, w, b, stride);
                    let sq = tape.mul(y, y);
                    Ok(tape.mean_all(sq))
                },
                &mut store,
                1e-5,
                false,
            )
            .unwrap();
            assert!(report.max_rel_err() < 1e-4, "stride {}: {:?}", stride, report);
        }

        let mut store = ParamStore::new();
        store.add("x", rnd(&[2, 3, 4, 4], 21));
        store.add("w", rnd(&[2, 3], 22));
        store.add("b", rnd(&[2], 23));
        let report = gradcheck(
            |tape, store, _| {
                let x = tape.param(store, "x");
                let w = tape.param(store, "w");
                let b = tape.param(store, "b");
                let y = tape.conv1x1(x, w, b);
                let sq = tape.mul(y, y);
                Ok(tape.mean_all(sq))
            },
            &mut store,
            1e-6,
            false,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-6, "{:?}", report);
    }

    #[test]
    fn band_filter_matches_finite_differences() {
        let mut store = ParamStore::new();
        store.add("x", rnd(&[1, 2, 4, 5], 31));
        // masks must be any smooth values; grads flow into them too
        store.add("m", rnd(&[3, 4, 3], 32).map(|v| 0.5 + 0.3 * v));
        let report = gradcheck(
            |tape, store, _| {
                let x = tape.param(store, "x");
                let m = tape.param(store, "m");
                let bands = tape.band_filter(x, m);
                let sq = tape.mul(bands, bands);
                Ok(tape.sum_all(sq))
            },
            &mut store,
            1e-6,
            false,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-6, "{:?}", report);
    }

    #[test]
    fn nll_matches_finite_differences() {
        let mut store = ParamStore::new();
        store.add("logits", rnd(&[1, 2, 3, 3], 41));
        let mut labels = Tensor::zeros(&[1, 3, 3]);
        for (i, v) in labels.data_mut().iter_mut().enumerate() {
            *v = if i % 3 == 0 { 1.0 } else if i % 5 == 0 { 255.0 } else { 0.0 };
        }
        let report = gradcheck(
            |tape, store, _| {
                let l = tape.param(store, "logits");
                let p = tape.softmax_axis(l, 1);
                Ok(tape.nll_weighted(p, &labels, [1.0, 2.5]))
            },
            &mut store,
            1e-6,
            false,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-6, "{:?}", report);
    }
}
