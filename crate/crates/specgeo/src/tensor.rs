//! Minimal dense f64 tensor substrate.
//!
//! Row-major storage, explicit shapes, and the handful of numeric
//! primitives the rest of the crate needs: elementwise math with
//! size-1 broadcasting, bilinear resizing, quantiles, scaled softmax,
//! and 1x1 channel mixing.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} (expects {})",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Elementwise binary op with size-1 broadcasting. Rank-0 tensors
    /// broadcast against anything; otherwise ranks must match and each
    /// dim must be equal or 1.
    pub fn binary(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let out_shape = broadcast_shape(&self.shape, &other.shape)?;
        let out_n: usize = out_shape.iter().product();
        let mut out = vec![0.0; out_n];
        let ra = expand_strides(&self.shape, &out_shape);
        let rb = expand_strides(&other.shape, &out_shape);
        let os = strides_of(&out_shape);
        for (flat, slot) in out.iter_mut().enumerate() {
            let mut ia = 0;
            let mut ib = 0;
            let mut rem = flat;
            for d in 0..out_shape.len() {
                let idx = rem / os[d];
                rem %= os[d];
                ia += idx * ra[d];
                ib += idx * rb[d];
            }
            *slot = f(self.data[ia], other.data[ib]);
        }
        Tensor::new(out_shape, out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a / b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum over one axis, keeping it as size 1.
    pub fn sum_axis(&self, axis: usize) -> Tensor {
        assert!(axis < self.rank());
        let mut out_shape = self.shape.clone();
        out_shape[axis] = 1;
        let mut out = Tensor::zeros(&out_shape);
        let st = self.strides();
        let ost = out.strides();
        for flat in 0..self.data.len() {
            let mut rem = flat;
            let mut oflat = 0;
            for d in 0..self.shape.len() {
                let idx = rem / st[d];
                rem %= st[d];
                let oidx = if d == axis { 0 } else { idx };
                oflat += oidx * ost[d];
            }
            out.data[oflat] += self.data[flat];
        }
        out
    }

    /// Reduce a gradient back to `target` shape by summing broadcast dims.
    pub fn unbroadcast(&self, target: &[usize]) -> Tensor {
        if self.shape == target {
            return self.clone();
        }
        if target.is_empty() {
            return Tensor::scalar(self.sum());
        }
        assert_eq!(self.rank(), target.len());
        let mut cur = self.clone();
        for d in 0..target.len() {
            if target[d] == 1 && cur.shape[d] != 1 {
                cur = cur.sum_axis(d);
            }
        }
        cur
    }
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        st[d] = st[d + 1] * shape[d + 1];
    }
    st
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.is_empty() {
        return Ok(b.to_vec());
    }
    if b.is_empty() {
        return Ok(a.to_vec());
    }
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "broadcast rank mismatch: {:?} vs {:?}",
            a, b
        )));
    }
    let mut out = Vec::with_capacity(a.len());
    for (&da, &db) in a.iter().zip(b) {
        if da == db || db == 1 {
            out.push(da);
        } else if da == 1 {
            out.push(db);
        } else {
            return Err(Error::Shape(format!("cannot broadcast {:?} with {:?}", a, b)));
        }
    }
    Ok(out)
}

/// Strides of `shape` viewed under `out_shape`: broadcast dims get stride 0.
fn expand_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    if shape.is_empty() {
        return vec![0; out_shape.len()];
    }
    let st = strides_of(shape);
    shape
        .iter()
        .zip(&st)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect()
}

/// Linear-interpolation empirical quantile on sorted values; q=0 is the
/// minimum, q=1 the maximum.
pub fn quantile(x: &[f64], q: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Empty("quantile of empty vector".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Invalid(format!("quantile q={} outside [0,1]", q)));
    }
    let mut s: Vec<f64> = x.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(s[lo] * (1.0 - frac) + s[hi] * frac)
}

/// Numerically stable softmax of `v[i] * scale[i]` across the slice.
pub fn softmax_scaled(v: &[f64], scale: &[f64]) -> Vec<f64> {
    assert_eq!(v.len(), scale.len());
    assert!(!v.is_empty());
    let z: Vec<f64> = v.iter().zip(scale).map(|(&a, &s)| a * s).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&x| (x - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.iter().map(|&x| x / sum).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    // log(1 + e^x), stable for large |x|
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus: y -> log(e^y - 1).
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

/// Bilinear resize of maps stored in the last two dims (half-pixel
/// centers, align-corners=false, edge clamped). Leading dims are batch.
pub fn resize_bilinear(m: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let r = m.rank();
    if r < 2 {
        return Err(Error::Shape("resize_bilinear needs rank >= 2".into()));
    }
    let in_h = m.shape()[r - 2];
    let in_w = m.shape()[r - 1];
    if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resize_bilinear: zero-sized dims".into()));
    }
    if in_h == out_h && in_w == out_w {
        return Ok(m.clone());
    }
    let batch: usize = m.shape()[..r - 2].iter().product();
    let mut out_shape = m.shape().to_vec();
    out_shape[r - 2] = out_h;
    out_shape[r - 1] = out_w;
    let mut out = vec![0.0; batch * out_h * out_w];
    let src = m.data();
    for b in 0..batch {
        let sbase = b * in_h * in_w;
        let obase = b * out_h * out_w;
        for oy in 0..out_h {
            let (y0, y1, fy) = sample_coords(oy, out_h, in_h);
            for ox in 0..out_w {
                let (x0, x1, fx) = sample_coords(ox, out_w, in_w);
                let v00 = src[sbase + y0 * in_w + x0];
                let v01 = src[sbase + y0 * in_w + x1];
                let v10 = src[sbase + y1 * in_w + x0];
                let v11 = src[sbase + y1 * in_w + x1];
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                out[obase + oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Source coordinates and blend weight for one output index under
/// half-pixel-center sampling.
pub fn sample_coords(o: usize, out_n: usize, in_n: usize) -> (usize, usize, f64) {
    let pos = (o as f64 + 0.5) * in_n as f64 / out_n as f64 - 0.5;
    let pos = pos.clamp(0.0, (in_n - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(in_n - 1);
    (lo, hi, pos - lo as f64)
}

/// Per-pixel affine channel mixing: x [B,C_in,h,w] -> [B,C_out,h,w].
pub fn conv1x1(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 || w.rank() != 2 || b.rank() != 1 {
        return Err(Error::Shape("conv1x1 expects x[B,C,h,w], w[Co,Ci], b[Co]".into()));
    }
    let (bs, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, wci) = (w.shape()[0], w.shape()[1]);
    if wci != ci || b.shape()[0] != co {
        return Err(Error::Shape(format!(
            "conv1x1 channel mismatch: x has {}, w is [{},{}], b has {}",
            ci,
            co,
            wci,
            b.shape()[0]
        )));
    }
    let hw = h * wd;
    let mut out = vec![0.0; bs * co * hw];
    for bi in 0..bs {
        for oc in 0..co {
            let obase = (bi * co + oc) * hw;
            for p in 0..hw {
                let mut acc = b.data()[oc];
                for icn in 0..ci {
                    acc += w.data()[oc * ci + icn] * x.data()[(bi * ci + icn) * hw + p];
                }
                out[obase + p] = acc;
            }
        }
    }
    Tensor::new(vec![bs, co, h, wd], out)
}
