//! Spectral Prototype Bank: learnable radial band masks over the half
//! spectrum, band-restricted features, and per-band masked-average
//! prototypes.
//!
//! Radii are parameterised through softplus gaps so 0 < r1 < ... holds
//! for every finite parameter value, and the sigmoid roll-offs
//! telescope to an exact partition of unity across bands.

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::fft::FreqGrid;
use crate::tensor::{sigmoid, softplus, softplus_inv, Tensor};

pub const PROTO_EPS: f64 = 1e-5;
pub const DEFAULT_BETA: f64 = 10.0;

/// Raw (pre-softplus) spectral parameters for a K-band bank.
/// `r_tilde[0]` feeds the first radius, the rest are gap parameters.
#[derive(Clone, Debug)]
pub struct SpectralParams {
    pub r_tilde: Vec<f64>,
    pub beta_tilde: f64,
    pub k: usize,
}

impl SpectralParams {
    /// Derived cut-off radii, strictly positive and strictly increasing.
    pub fn radii(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.r_tilde.len());
        let mut acc = 0.0;
        for &rt in &self.r_tilde {
            let next = acc + softplus(rt);
            // softplus is positive, but a denormal gap can be absorbed
            // by a large accumulator at f64; keep the order strict
            acc = if next > acc { next } else { acc.next_up() };
            out.push(acc);
        }
        out
    }

    pub fn beta(&self) -> f64 {
        softplus(self.beta_tilde) + 1.0
    }
}

/// Solve the raw parameters so the derived radii hit the given targets
/// exactly (softplus is inverted in closed form).
pub fn init_spectral_params_k(targets: &[f64], beta_target: f64) -> Result<SpectralParams> {
    let k = targets.len() + 1;
    let mut prev = 0.0;
    for &t in targets {
        if t <= prev {
            return Err(Error::Invalid(format!(
                "radius targets must be strictly increasing and positive, got {:?}",
                targets
            )));
        }
        prev = t;
    }
    if beta_target <= 1.0 {
        return Err(Error::Invalid("beta target must exceed 1".into()));
    }
    let mut r_tilde = Vec::with_capacity(targets.len());
    let mut prev = 0.0;
    for &t in targets {
        r_tilde.push(softplus_inv(t - prev));
        prev = t;
    }
    Ok(SpectralParams { r_tilde, beta_tilde: softplus_inv(beta_target - 1.0), k })
}

/// The paper's three-band initialisation.
pub fn init_spectral_params(r1_target: f64, r2_target: f64, beta_target: f64) -> Result<SpectralParams> {
    if r1_target <= 0.0 || r2_target <= r1_target {
        return Err(Error::Invalid(format!(
            "need 0 < r1 < r2, got ({}, {})",
            r1_target, r2_target
        )));
    }
    init_spectral_params_k(&[r1_target, r2_target], beta_target)
}

/// Default radius targets per band count; K=3 uses the published
/// (0.25, 0.55), other K values spread cut-offs evenly below the grid
/// maximum radius.
pub fn default_radius_targets(k: usize) -> Vec<f64> {
    assert!((1..=5).contains(&k));
    if k == 3 {
        vec![0.25, 0.55]
    } else {
        (1..k).map(|i| 0.7 * i as f64 / k as f64).collect()
    }
}

pub fn register_spectral_params(store: &mut ParamStore, sp: &SpectralParams) {
    if sp.k > 1 {
        store.add("spb.r_tilde", Tensor::new(vec![sp.k - 1], sp.r_tilde.clone()).unwrap());
    }
    store.add("spb.beta_tilde", Tensor::scalar(sp.beta_tilde));
}

pub fn spectral_params_from_store(store: &ParamStore, k: usize) -> SpectralParams {
    let r_tilde = if k > 1 { store.get("spb.r_tilde").value.data().to_vec() } else { vec![] };
    SpectralParams { r_tilde, beta_tilde: store.get("spb.beta_tilde").value.item(), k }
}

/// Smooth radial band masks on the tape: [K, h, w_r], differentiable in
/// the raw radius and sharpness parameters.
pub fn band_masks_var(tape: &mut Tape, store: &ParamStore, k: usize, grid: &FreqGrid) -> Var {
    let rho = tape.constant(
        Tensor::new(vec![grid.h, grid.w_r], grid.rho.clone()).unwrap(),
    );
    if k == 1 {
        let ones = Tensor::full(&[1, grid.h, grid.w_r], 1.0);
        return tape.constant(ones);
    }
    let beta_raw = tape.param(store, "spb.beta_tilde");
    let beta_sp = tape.softplus(beta_raw);
    let beta = tape.add_scalar(beta_sp, 1.0);
    let r_raw = tape.param(store, "spb.r_tilde");

    // cumulative softplus radii
    let mut radii = Vec::with_capacity(k - 1);
    let mut acc: Option<Var> = None;
    for i in 0..k - 1 {
        let ri_raw = tape.select(r_raw, 0, i);
        let ri_flat = tape.reshape(ri_raw, &[]);
        let gap = tape.softplus(ri_flat);
        let r = match acc {
            None => gap,
            Some(prev) => tape.add(prev, gap),
        };
        acc = Some(r);
        radii.push(r);
    }

    // telescoping sigmoids
    let mut sigmas = Vec::with_capacity(k - 1);
    for &r in &radii {
        let diff = tape.sub(r, rho);
        let scaled = tape.mul(beta, diff);
        sigmas.push(tape.sigmoid(scaled));
    }
    let mut masks = Vec::with_capacity(k);
    masks.push(sigmas[0]);
    for j in 1..k - 1 {
        masks.push(tape.sub(sigmas[j], sigmas[j - 1]));
    }
    let last_neg = tape.neg(sigmas[k - 2]);
    masks.push(tape.add_scalar(last_neg, 1.0));
    tape.stack0(&masks)
}

/// Mask values without a parameter store, for inspection and tests.
pub fn band_masks(sp: &SpectralParams, grid: &FreqGrid) -> Tensor {
    let n = grid.h * grid.w_r;
    if sp.k == 1 {
        return Tensor::full(&[1, grid.h, grid.w_r], 1.0);
    }
    let radii = sp.radii();
    let beta = sp.beta();
    let mut out = Tensor::zeros(&[sp.k, grid.h, grid.w_r]);
    for (i, &rho) in grid.rho.iter().enumerate() {
        let s: Vec<f64> = radii.iter().map(|&r| sigmoid(beta * (r - rho))).collect();
        out.data_mut()[i] = s[0];
        for j in 1..sp.k - 1 {
            out.data_mut()[j * n + i] = s[j] - s[j - 1];
        }
        out.data_mut()[(sp.k - 1) * n + i] = 1.0 - s[sp.k - 2];
    }
    out
}

/// Band-restricted features: x [B,C,h,w] -> [B,C,K,h,w].
pub fn decompose(tape: &mut Tape, x: Var, masks: Var) -> Var {
    tape.band_filter(x, masks)
}

/// Masked Average Pooling of one band: [B,C,h,w] x [B,1,h,w] -> [B,C].
pub fn map_prototype(tape: &mut Tape, band: Var, mask_ds: Var) -> Var {
    let (b, c) = {
        let s = tape.value(band).shape();
        (s[0], s[1])
    };
    let weighted = tape.mul(band, mask_ds);
    let num_h = tape.sum_axis(weighted, 2);
    let num = tape.sum_axis(num_h, 3); // [B,C,1,1]
    let den_h = tape.sum_axis(mask_ds, 2);
    let den_raw = tape.sum_axis(den_h, 3); // [B,1,1,1]
    let den = tape.clamp_min(den_raw, PROTO_EPS);
    let proto = tape.div(num, den);
    tape.reshape(proto, &[b, c])
}

pub struct SpbOutput {
    /// [B, C, K, h, w]
    pub bands_q: Var,
    /// [B, C, K]
    pub protos: Var,
    /// [K, h, w_r]
    pub masks: Var,
    /// downsampled mask [B, 1, h, w]
    pub mask_ds: Var,
}

/// Full bank forward: decompose support and query, pool one prototype
/// per band under the downsampled support mask. The same masks node is
/// reused for both feature maps, and callers invoke this twice per
/// episode (mask and its complement) against one shared store.
pub fn spb_forward(
    tape: &mut Tape,
    store: &ParamStore,
    f_s: Var,
    f_q: Var,
    support_mask: Var, // [B, H, W]
    k: usize,
    grid: &FreqGrid,
) -> SpbOutput {
    let (b, c, h, w) = {
        let s = tape.value(f_s).shape();
        (s[0], s[1], s[2], s[3])
    };
    assert_eq!(tape.value(f_q).shape(), &[b, c, h, w]);
    let masks = band_masks_var(tape, store, k, grid);
    let bands_s = decompose(tape, f_s, masks);
    let bands_q = decompose(tape, f_q, masks);
    let mask_small = tape.resize_bilinear(support_mask, h, w);
    let mask_ds = tape.reshape(mask_small, &[b, 1, h, w]);

    let mut protos = Vec::with_capacity(k);
    for ki in 0..k {
        let band5 = tape.select(bands_s, 2, ki);
        let band = tape.reshape(band5, &[b, c, h, w]);
        let p = map_prototype(tape, band, mask_ds);
        protos.push(tape.reshape(p, &[b, c, 1]));
    }
    let protos = tape.concat(&protos, 2);
    SpbOutput { bands_q, protos, masks, mask_ds }
}
