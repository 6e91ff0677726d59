//! Geodesic Matcher: per-band cosine maps, quantile-shifted soft
//! seeding, heat diffusion over an 8-neighbour feature affinity, gated
//! cosine/geodesic fusion, and band-weighted prototype blending.

use crate::autograd::{ParamStore, Tape, TauCache, Var};
use crate::tensor::Tensor;

/// Fixed neighbour order (dy, dx); affinity channel n uses shift n.
pub const NEIGHBOURS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

pub const NORM_EPS: f64 = 1e-8;

/// Fixed matcher scalars; the learnable gates/logits/blend conv live in
/// the parameter store.
#[derive(Clone, Copy, Debug)]
pub struct GmConfig {
    pub k: usize,
    pub t: usize,
    pub sigma_a: f64,
    pub s: f64,
    pub q: f64,
}

impl Default for GmConfig {
    fn default() -> Self {
        GmConfig { k: 3, t: 5, sigma_a: 0.5, s: 20.0, q: 0.85 }
    }
}

/// Gates start at alpha = 0.5 (raw 0), per-band logits at one, and the
/// blend conv at identity.
pub fn register_gm_params(store: &mut ParamStore, k: usize, c: usize) {
    store.add("gm.alpha_tilde", Tensor::zeros(&[k]));
    store.add("gm.band_logits", Tensor::full(&[k], 1.0));
    let mut w = Tensor::zeros(&[c, c]);
    for i in 0..c {
        w.data_mut()[i * c + i] = 1.0;
    }
    store.add("gm.blend_w", w);
    store.add("gm.blend_b", Tensor::zeros(&[c]));
}

/// Cosine similarity of every pixel against a prototype vector, with
/// eps added to each norm: [B,C,h,w] x [B,C] -> [B,1,h,w].
pub fn cosine_map(tape: &mut Tape, band: Var, proto: Var) -> Var {
    let (b, c) = {
        let s = tape.value(band).shape();
        (s[0], s[1])
    };
    assert_eq!(tape.value(proto).shape(), &[b, c]);
    let pr = tape.reshape(proto, &[b, c, 1, 1]);
    let prod = tape.mul(band, pr);
    let dot = tape.sum_axis(prod, 1);
    let b2 = tape.mul(band, band);
    let b2s = tape.sum_axis(b2, 1);
    let normx = tape.sqrt_guarded(b2s);
    let p2 = tape.mul(pr, pr);
    let p2s = tape.sum_axis(p2, 1);
    let normp = tape.sqrt_guarded(p2s);
    let nx = tape.add_scalar(normx, NORM_EPS);
    let np = tape.add_scalar(normp, NORM_EPS);
    let den = tape.mul(nx, np);
    tape.div(dot, den)
}

/// Quantile-shifted sigmoid seeding: seed = sigma(s (cos - tau)) with
/// tau the per-sample q-quantile under stop-gradient.
pub fn soft_seed(tape: &mut Tape, cos: Var, q: f64, s: f64, cache: &mut TauCache) -> Var {
    let tau = tape.quantile_sg(cos, q, cache);
    let centered = tape.sub(cos, tau);
    let scaled = tape.scale(centered, s);
    tape.sigmoid(scaled)
}

/// Per-band 8-neighbour affinity: A_n = exp(-(1 - c_n)/sigma_a) with
/// c_n the cosine between L2-normalised features at a site and its
/// shifted neighbour; out-of-bound shifts get exactly 0.
pub fn affinity8(tape: &mut Tape, band: Var, sigma_a: f64) -> Var {
    assert!(sigma_a > 0.0);
    let (h, w) = {
        let s = tape.value(band).shape();
        (s[2], s[3])
    };
    let b2 = tape.mul(band, band);
    let b2s = tape.sum_axis(b2, 1);
    let norm = tape.sqrt_guarded(b2s);
    let norm_eps = tape.add_scalar(norm, NORM_EPS);
    let unit = tape.div(band, norm_eps);
    let mut channels = Vec::with_capacity(8);
    for &(dy, dx) in &NEIGHBOURS {
        let shifted = tape.shift2d(unit, dy, dx);
        let prod = tape.mul(unit, shifted);
        let c = tape.sum_axis(prod, 1); // [B,1,h,w]
        let cm1 = tape.add_scalar(c, -1.0);
        let expo = tape.scale(cm1, 1.0 / sigma_a);
        let a = tape.exp(expo);
        let valid = tape.constant(bounds_mask(h, w, dy, dx));
        channels.push(tape.mul(a, valid));
    }
    tape.concat(&channels, 1)
}

/// 1 where the shifted neighbour exists, 0 at the border.
fn bounds_mask(h: usize, w: usize, dy: isize, dx: isize) -> Tensor {
    let mut m = Tensor::zeros(&[1, 1, h, w]);
    for i in 0..h as isize {
        for j in 0..w as isize {
            let (si, sj) = (i + dy, j + dx);
            if si >= 0 && si < h as isize && sj >= 0 && sj < w as isize {
                m.data_mut()[(i * w as isize + j) as usize] = 1.0;
            }
        }
    }
    m
}

/// One Jacobi step with unit self-loop:
/// u' = (u + sum_n A_n u(p_n)) / (1 + sum_n A_n).
pub fn diffuse_step(tape: &mut Tape, u: Var, affinity: Var) -> Var {
    let mut acc = u;
    for (n, &(dy, dx)) in NEIGHBOURS.iter().enumerate() {
        let a_n = tape.select(affinity, 1, n);
        let shifted = tape.shift2d(u, dy, dx);
        let term = tape.mul(a_n, shifted);
        acc = tape.add(acc, term);
    }
    let asum = tape.sum_axis(affinity, 1);
    let denom = tape.add_scalar(asum, 1.0);
    tape.div(acc, denom)
}

/// T-fold diffusion; T=0 returns the seed unchanged.
pub fn heat_diffuse(tape: &mut Tape, seed: Var, affinity: Var, t: usize) -> Var {
    let mut u = seed;
    for _ in 0..t {
        u = diffuse_step(tape, u, affinity);
    }
    u
}

/// Convex gate: score = (1 - alpha) cos + alpha geo, alpha = sigma(raw).
pub fn fuse(tape: &mut Tape, cos: Var, geo: Var, alpha_tilde: Var) -> Var {
    let alpha = tape.sigmoid(alpha_tilde);
    let diff = tape.sub(geo, cos);
    let gated = tape.mul(alpha, diff);
    tape.add(cos, gated)
}

/// Pixel-wise convex combination of band prototypes driven by the score
/// softmax, refined by the 1x1 blend conv.
pub fn blend(
    tape: &mut Tape,
    store: &ParamStore,
    protos: Var,  // [B,C,K]
    scores: Var,  // [B,K,h,w]
    s: f64,
) -> (Var, Var) {
    let (b, c, k) = {
        let sh = tape.value(protos).shape();
        (sh[0], sh[1], sh[2])
    };
    let logits = tape.param(store, "gm.band_logits");
    let l4 = tape.reshape(logits, &[1, k, 1, 1]);
    let scaled0 = tape.mul(scores, l4);
    let scaled = tape.scale(scaled0, s);
    let weights = tape.softmax_axis(scaled, 1); // [B,K,h,w]
    let mut mixed: Option<Var> = None;
    for ki in 0..k {
        let wk = tape.select(weights, 1, ki); // [B,1,h,w]
        let pk3 = tape.select(protos, 2, ki); // [B,C,1]
        let pk = tape.reshape(pk3, &[b, c, 1, 1]);
        let term = tape.mul(wk, pk); // [B,C,h,w]
        mixed = Some(match mixed {
            None => term,
            Some(m) => tape.add(m, term),
        });
    }
    let w = tape.param(store, "gm.blend_w");
    let bias = tape.param(store, "gm.blend_b");
    let blended = tape.conv1x1(mixed.unwrap(), w, bias);
    (blended, weights)
}

pub struct GmOutput {
    /// [B, 2C+K, h, w] = concat(F_q_raw, F_blended, scores)
    pub matched: Var,
    /// [B, K, h, w]
    pub scores: Var,
    pub cos_maps: Vec<Var>,
    pub seed_maps: Vec<Var>,
    pub geo_maps: Vec<Var>,
    pub blend_weights: Var,
}

/// One matcher forward pass over all bands.
pub fn gm_forward(
    tape: &mut Tape,
    store: &ParamStore,
    f_q_raw: Var,  // [B,C,h,w]
    bands_q: Var,  // [B,C,K,h,w]
    protos: Var,   // [B,C,K]
    cfg: &GmConfig,
    cache: &mut TauCache,
) -> GmOutput {
    let (b, c, k, h, w) = {
        let s = tape.value(bands_q).shape();
        (s[0], s[1], s[2], s[3], s[4])
    };
    assert_eq!(tape.value(protos).shape(), &[b, c, k]);
    assert_eq!(cfg.k, k);

    // stage 1: cosine maps
    let mut cos_maps = Vec::with_capacity(k);
    let mut band_vars = Vec::with_capacity(k);
    for ki in 0..k {
        let band5 = tape.select(bands_q, 2, ki);
        let band = tape.reshape(band5, &[b, c, h, w]);
        let proto3 = tape.select(protos, 2, ki);
        let proto = tape.reshape(proto3, &[b, c]);
        cos_maps.push(cosine_map(tape, band, proto));
        band_vars.push(band);
    }

    // stages 2-3: soft seeds and heat diffusion per band
    let mut seed_maps = Vec::with_capacity(k);
    let mut geo_maps = Vec::with_capacity(k);
    for ki in 0..k {
        let seed = soft_seed(tape, cos_maps[ki], cfg.q, cfg.s, cache);
        let aff = affinity8(tape, band_vars[ki], cfg.sigma_a);
        let geo = heat_diffuse(tape, seed, aff, cfg.t);
        seed_maps.push(seed);
        geo_maps.push(geo);
    }

    // stage 4: gated fusion
    let alpha_raw = tape.param(store, "gm.alpha_tilde");
    let mut score_maps = Vec::with_capacity(k);
    for ki in 0..k {
        let ak1 = tape.select(alpha_raw, 0, ki);
        let ak = tape.reshape(ak1, &[]);
        score_maps.push(fuse(tape, cos_maps[ki], geo_maps[ki], ak));
    }
    let scores = tape.concat(&score_maps, 1); // [B,K,h,w]

    // stage 5: band-weighted blending and output assembly
    let (blended, blend_weights) = blend(tape, store, protos, scores, cfg.s);
    let matched = tape.concat(&[f_q_raw, blended, scores], 1);

    GmOutput { matched, scores, cos_maps, seed_maps, geo_maps, blend_weights }
}
