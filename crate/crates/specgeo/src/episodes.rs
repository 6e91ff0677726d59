//! Desk-scale harness: synthetic phantom episodes, a small
//! encoder/decoder model around the spectral bank and matcher, the
//! Dice metric, episodic training, and the K/T ablation driver.

use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{gradcheck, GradcheckReport, ParamStore, Tape, TauCache, Var};
use crate::error::{Error, Result};
use crate::fft::freq_grid;
use crate::gm::{gm_forward, register_gm_params, GmConfig, GmOutput};
use crate::losses::{
    align_loss, boundary_loss, class_weights, fg_target, nll, total_loss, THETA, THETA0,
};
use crate::spb::{
    default_radius_targets, init_spectral_params_k, register_spectral_params, spb_forward,
    spectral_params_from_store, SpbOutput, DEFAULT_BETA,
};
use crate::tensor::Tensor;

/// One 1-way 1-shot task: two perturbations of the same phantom.
pub struct Episode {
    /// [1,1,H,W]
    pub i_s: Tensor,
    pub i_q: Tensor,
    /// [1,H,W] with values {0,1}
    pub m_s: Tensor,
    pub m_q: Tensor,
    /// [1,H,W] clutter-blob indicator on the query (not part of m_q)
    pub clutter_q: Tensor,
    pub seed: u64,
}

/// Phantom family parameters.
#[derive(Clone, Copy, Debug)]
pub struct PhantomSpec {
    pub h: usize,
    pub w: usize,
    /// organ semi-axis range in pixels
    pub organ_r: (f64, f64),
    /// interior texture cycles across the image
    pub texture_freq: f64,
    /// organ-background intensity gap
    pub contrast: f64,
    /// disconnected clutter blobs sharing the organ intensity
    pub clutter: usize,
    /// additive Gaussian noise sigma
    pub noise: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            h: 64,
            w: 64,
            organ_r: (9.0, 14.0),
            texture_freq: 6.0,
            contrast: 0.5,
            clutter: 2,
            noise: 0.03,
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0f64);
    let u2: f64 = rng.gen_range(0.0..1.0f64);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

struct OrganDraw {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    phi: f64,
}

fn inside_ellipse(o: &OrganDraw, y: f64, x: f64, ty: f64, tx: f64) -> bool {
    let dy = y - (o.cy + ty);
    let dx = x - (o.cx + tx);
    let (s, c) = o.phi.sin_cos();
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    (u / o.a).powi(2) + (v / o.b).powi(2) <= 1.0
}

/// Deterministic phantom episode: support and query are translations
/// (combined shift <= 8 px) and intensity jitters (<= 10%) of one
/// organ, with clutter blobs kept disconnected from both placements.
pub fn gen_phantom(spec: &PhantomSpec, seed: u64) -> Result<Episode> {
    let (h, w) = (spec.h, spec.w);
    if h < 32 || w < 32 {
        return Err(Error::Invalid(format!("phantom needs h,w >= 32, got {}x{}", h, w)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let organ = OrganDraw {
        cy: h as f64 / 2.0 + rng.gen_range(-3.0..3.0),
        cx: w as f64 / 2.0 + rng.gen_range(-3.0..3.0),
        a: rng.gen_range(spec.organ_r.0..spec.organ_r.1),
        b: rng.gen_range(spec.organ_r.0..spec.organ_r.1),
        phi: rng.gen_range(0.0..std::f64::consts::PI),
    };
    // per-image translation in [-4,4] so the relative shift is <= 8
    let t_s = (rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0));
    let t_q = (rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0));
    let g_s = rng.gen_range(0.9..1.1);
    let g_q = rng.gen_range(0.9..1.1);

    // clutter blobs: same intensity as the organ, placed so they never
    // touch either organ placement
    let max_axis = organ.a.max(organ.b);
    let mut blobs: Vec<(f64, f64, f64)> = Vec::new();
    let mut tries = 0;
    while blobs.len() < spec.clutter && tries < 200 {
        tries += 1;
        let r = rng.gen_range(2.0..4.0);
        let by = rng.gen_range(r + 1.0..h as f64 - r - 1.0);
        let bx = rng.gen_range(r + 1.0..w as f64 - r - 1.0);
        let far = |t: (f64, f64)| {
            let d = ((by - organ.cy - t.0).powi(2) + (bx - organ.cx - t.1).powi(2)).sqrt();
            d > max_axis + r + 5.0
        };
        let clear = blobs
            .iter()
            .all(|&(oy, ox, or)| ((by - oy).powi(2) + (bx - ox).powi(2)).sqrt() > or + r + 2.0);
        if far(t_s) && far(t_q) && clear {
            blobs.push((by, bx, r));
        }
    }

    let render = |t: (f64, f64), gain: f64, rng: &mut ChaCha8Rng| -> (Tensor, Tensor, Tensor) {
        let mut img = Tensor::zeros(&[1, 1, h, w]);
        let mut mask = Tensor::zeros(&[1, h, w]);
        let mut clut = Tensor::zeros(&[1, h, w]);
        let organ_val = (0.2 + spec.contrast) * gain;
        for i in 0..h {
            for j in 0..w {
                let (y, x) = (i as f64, j as f64);
                let idx = i * w + j;
                let mut v = 0.2 * gain;
                if inside_ellipse(&organ, y, x, t.0, t.1) {
                    let tex = 0.08
                        * (2.0 * std::f64::consts::PI * spec.texture_freq * x / w as f64).sin()
                        * (2.0 * std::f64::consts::PI * spec.texture_freq * y / h as f64).sin();
                    v = organ_val + tex;
                    mask.data_mut()[idx] = 1.0;
                } else {
                    for &(by, bx, r) in &blobs {
                        if (y - by - t.0).powi(2) + (x - bx - t.1).powi(2) <= r * r {
                            v = organ_val;
                            clut.data_mut()[idx] = 1.0;
                            break;
                        }
                    }
                }
                img.data_mut()[idx] = v + spec.noise * gauss(rng);
            }
        }
        (img, mask, clut)
    };

    let (i_s, m_s, _) = render(t_s, g_s, &mut rng);
    let (i_q, m_q, clutter_q) = render(t_q, g_q, &mut rng);
    let fg_s = m_s.data().iter().filter(|&&v| v == 1.0).count();
    let fg_q = m_q.data().iter().filter(|&&v| v == 1.0).count();
    if fg_s < 16 || fg_q < 16 {
        return Err(Error::Fixture(format!(
            "degenerate phantom: fg counts {} / {} (seed {})",
            fg_s, fg_q, seed
        )));
    }
    Ok(Episode { i_s, i_q, m_s, m_q, clutter_q, seed })
}

/// Model hyperparameters; the learnables live in a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct ToyConfig {
    /// square image side H = W
    pub image: usize,
    /// encoder output channels
    pub c: usize,
    /// first encoder layer channels
    pub enc_mid: usize,
    pub gm: GmConfig,
    /// test mode: both branches decode through the fg decoder
    pub tied_decoders: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { image: 64, c: 32, enc_mid: 16, gm: GmConfig::default(), tied_decoders: false }
    }
}

impl ToyConfig {
    /// feature side after the stride-2,2,1 encoder
    pub fn feat(&self) -> usize {
        self.image / 4
    }

    pub fn decoder_in(&self) -> usize {
        2 * self.c + self.gm.k
    }
}

fn conv_init(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize) -> Tensor {
    let scale = (1.0 / (in_c * 9) as f64).sqrt();
    let n = out_c * in_c * 9;
    Tensor::new(
        vec![out_c, in_c, 3, 3],
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Register every learnable: encoder, spectral bank, matcher, and the
/// two decoders. fg and bg branches share everything except decoders.
pub fn register_toy_model(store: &mut ParamStore, cfg: &ToyConfig, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store.add("enc.w1", conv_init(&mut rng, cfg.enc_mid, 1));
    store.add("enc.b1", Tensor::zeros(&[cfg.enc_mid]));
    store.add("enc.w2", conv_init(&mut rng, cfg.c, cfg.enc_mid));
    store.add("enc.b2", Tensor::zeros(&[cfg.c]));
    store.add("enc.w3", conv_init(&mut rng, cfg.c, cfg.c));
    store.add("enc.b3", Tensor::zeros(&[cfg.c]));
    let sp = init_spectral_params_k(&default_radius_targets(cfg.gm.k), DEFAULT_BETA)?;
    register_spectral_params(store, &sp);
    register_gm_params(store, cfg.gm.k, cfg.c);
    for dec in ["dec_fg", "dec_bg"] {
        store.add(&format!("{}.w1", dec), conv_init(&mut rng, cfg.c, cfg.decoder_in()));
        store.add(&format!("{}.b1", dec), Tensor::zeros(&[cfg.c]));
        store.add(&format!("{}.w2", dec), conv_init(&mut rng, 1, cfg.c));
        store.add(&format!("{}.b2", dec), Tensor::zeros(&[1]));
    }
    Ok(())
}

fn encode(tape: &mut Tape, store: &ParamStore, img: Var) -> Var {
    let w1 = tape.param(store, "enc.w1");
    let b1 = tape.param(store, "enc.b1");
    let x = tape.conv3x3(img, w1, b1, 2);
    let x = tape.tanh(x);
    let w2 = tape.param(store, "enc.w2");
    let b2 = tape.param(store, "enc.b2");
    let x = tape.conv3x3(x, w2, b2, 2);
    let x = tape.tanh(x);
    let w3 = tape.param(store, "enc.w3");
    let b3 = tape.param(store, "enc.b3");
    let x = tape.conv3x3(x, w3, b3, 1);
    tape.tanh(x)
}

fn decode(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, out: usize) -> Var {
    let w1 = tape.param(store, &format!("{}.w1", prefix));
    let b1 = tape.param(store, &format!("{}.b1", prefix));
    let h = tape.conv3x3(x, w1, b1, 1);
    let h = tape.tanh(h);
    let w2 = tape.param(store, &format!("{}.w2", prefix));
    let b2 = tape.param(store, &format!("{}.b2", prefix));
    let logits = tape.conv3x3(h, w2, b2, 1);
    tape.resize_bilinear(logits, out, out)
}

pub struct ForwardOutput {
    /// SoftPrediction [B,2,H,W]: channel 0 background, 1 foreground
    pub pred: Var,
    pub spb_fg: SpbOutput,
    pub gm_fg: GmOutput,
    pub spb_bg: SpbOutput,
    pub gm_bg: GmOutput,
}

/// Symmetric fg/bg forward: the bank and matcher run twice with the
/// support mask and its complement against one shared store, then each
/// branch's decoder logit is softmaxed into the two-class prediction.
pub fn episode_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ToyConfig,
    i_s: &Tensor,
    i_q: &Tensor,
    m_s: &Tensor, // [B,H,W], soft values allowed
    cache: &mut TauCache,
) -> Result<ForwardOutput> {
    let hs = cfg.feat();
    let grid = freq_grid(hs, hs)?;
    let is_v = tape.constant(i_s.clone());
    let iq_v = tape.constant(i_q.clone());
    let f_s = encode(tape, store, is_v);
    let f_q = encode(tape, store, iq_v);

    let m_fg = tape.constant(m_s.clone());
    let ones = tape.constant(Tensor::full(m_s.shape(), 1.0));
    let m_bg = tape.sub(ones, m_fg);

    let spb_fg = spb_forward(tape, store, f_s, f_q, m_fg, cfg.gm.k, &grid);
    let gm_fg = gm_forward(tape, store, f_q, spb_fg.bands_q, spb_fg.protos, &cfg.gm, cache);
    let spb_bg = spb_forward(tape, store, f_s, f_q, m_bg, cfg.gm.k, &grid);
    let gm_bg = gm_forward(tape, store, f_q, spb_bg.bands_q, spb_bg.protos, &cfg.gm, cache);

    let bg_dec = if cfg.tied_decoders { "dec_fg" } else { "dec_bg" };
    let logit_fg = decode(tape, store, "dec_fg", gm_fg.matched, cfg.image);
    let logit_bg = decode(tape, store, bg_dec, gm_bg.matched, cfg.image);
    let logits = tape.concat(&[logit_bg, logit_fg], 1);
    let pred = tape.softmax_axis(logits, 1);
    Ok(ForwardOutput { pred, spb_fg, gm_fg, spb_bg, gm_bg })
}

/// Full objective for one episode; `fixed_pseudo` substitutes a frozen
/// pseudo-mask so finite differences see the same stop-gradient
/// boundary the analytic pass does.
pub struct LossTerms {
    pub total: Var,
    pub prim: Var,
    pub boundary: Var,
    pub align: Var,
}

pub fn episode_loss(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ToyConfig,
    ep: &Episode,
    cache: &mut TauCache,
    fixed_pseudo: Option<&Tensor>,
) -> Result<LossTerms> {
    let fwd = episode_forward(tape, store, cfg, &ep.i_s, &ep.i_q, &ep.m_s, cache)?;
    let w = class_weights(&ep.m_q);
    let prim = nll(tape, fwd.pred, &ep.m_q, w);
    let pred_fg = tape.select(fwd.pred, 1, 1);
    let y_fg = tape.constant(fg_target(&ep.m_q));
    let boundary = boundary_loss(tape, pred_fg, y_fg, THETA0, THETA);

    let (b, hh, ww) = (ep.m_s.shape()[0], ep.m_s.shape()[1], ep.m_s.shape()[2]);
    let mut swapped = |tape: &mut Tape, pm: &Tensor| -> Result<Var> {
        let pm3 = Tensor::new(vec![b, hh, ww], pm.data().to_vec())?;
        let out = episode_forward(tape, store, cfg, &ep.i_q, &ep.i_s, &pm3, cache)?;
        Ok(out.pred)
    };
    let align = match fixed_pseudo {
        Some(pm) => {
            let pred_s = swapped(tape, pm)?;
            let ws = class_weights(&ep.m_s);
            let l_prim = nll(tape, pred_s, &ep.m_s, ws);
            let fg = tape.select(pred_s, 1, 1);
            let yt = tape.constant(fg_target(&ep.m_s));
            let l_b = boundary_loss(tape, fg, yt, THETA0, THETA);
            tape.add(l_prim, l_b)
        }
        None => align_loss(tape, fwd.pred, &ep.m_s, swapped)?,
    };
    let total = total_loss(tape, prim, boundary, align);
    Ok(LossTerms { total, prim, boundary, align })
}

/// Dice similarity in percent; both-empty pairs score 100.
pub fn dice(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "dice shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    for &v in a.data().iter().chain(b.data()) {
        if v != 0.0 && v != 1.0 {
            return Err(Error::Invalid("dice expects binary masks".into()));
        }
    }
    let inter: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na: f64 = a.data().iter().sum();
    let nb: f64 = b.data().iter().sum();
    if na + nb == 0.0 {
        return Ok(100.0);
    }
    Ok(2.0 * inter / (na + nb) * 100.0)
}

/// Hard foreground mask from a soft prediction.
pub fn predicted_mask(pred: &Tensor) -> Tensor {
    let (b, h, w) = (pred.shape()[0], pred.shape()[2], pred.shape()[3]);
    let hw = h * w;
    let mut m = Tensor::zeros(&[b, h, w]);
    for bi in 0..b {
        for p in 0..hw {
            if pred.data()[(bi * 2 + 1) * hw + p] > pred.data()[bi * 2 * hw + p] {
                m.data_mut()[bi * hw + p] = 1.0;
            }
        }
    }
    m
}

/// Mean predicted foreground probability over clutter pixels: the
/// false-positive mass the matcher is supposed to suppress.
pub fn clutter_fp_mass(pred: &Tensor, clutter: &Tensor) -> f64 {
    let (b, h, w) = (pred.shape()[0], pred.shape()[2], pred.shape()[3]);
    let hw = h * w;
    let mut acc = 0.0;
    let mut n = 0usize;
    for bi in 0..b {
        for p in 0..hw {
            if clutter.data()[bi * hw + p] == 1.0 {
                acc += pred.data()[(bi * 2 + 1) * hw + p];
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub iters: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_gamma: f64,
    pub decay_every: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 500,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_gamma: 0.9,
            decay_every: 1000,
            seed: 0,
            eval_every: 100,
            eval_episodes: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct IterLog {
    pub iter: usize,
    pub l_prim: f64,
    pub l_b: f64,
    pub l_align: f64,
    pub l_total: f64,
}

pub struct TrainResult {
    pub logs: Vec<IterLog>,
    /// (iter, r1, r2); r2 is NaN for k < 3
    pub radii: Vec<(usize, f64, f64)>,
    /// (iter, mean dice over the held-out set)
    pub dice: Vec<(usize, f64)>,
}

fn episode_seed(master: u64, iter: u64) -> u64 {
    master.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(iter)
}

const EVAL_SEED_BASE: u64 = 0xE7A1;

/// Mean Dice and clutter false-positive mass on held-out phantoms.
pub fn evaluate(
    store: &ParamStore,
    cfg: &ToyConfig,
    spec: &PhantomSpec,
    episodes: usize,
) -> Result<(f64, f64)> {
    let mut dsum = 0.0;
    let mut fsum = 0.0;
    for e in 0..episodes {
        let ep = gen_phantom(spec, episode_seed(EVAL_SEED_BASE, e as u64))?;
        let mut tape = Tape::new();
        let mut cache = TauCache::recording();
        let fwd = episode_forward(&mut tape, store, cfg, &ep.i_s, &ep.i_q, &ep.m_s, &mut cache)?;
        let pred = tape.value(fwd.pred);
        dsum += dice(&predicted_mask(pred), &ep.m_q)?;
        fsum += clutter_fp_mass(pred, &ep.clutter_q);
    }
    Ok((dsum / episodes as f64, fsum / episodes as f64))
}

/// Episodic SGD with step decay. Aborts on a non-finite loss.
pub fn train(
    store: &mut ParamStore,
    cfg: &ToyConfig,
    tc: &TrainConfig,
    spec: &PhantomSpec,
) -> Result<TrainResult> {
    if tc.iters == 0 {
        return Err(Error::Invalid("train needs iters >= 1".into()));
    }
    let mut logs = Vec::with_capacity(tc.iters);
    let mut radii_log = Vec::new();
    let mut dice_log = Vec::new();
    for iter in 0..tc.iters {
        let ep = gen_phantom(spec, episode_seed(tc.seed, iter as u64))?;
        let mut tape = Tape::new();
        let mut cache = TauCache::recording();
        let lt = episode_loss(&mut tape, store, cfg, &ep, &mut cache, None)?;
        let row = IterLog {
            iter,
            l_prim: tape.value(lt.prim).data()[0],
            l_b: tape.value(lt.boundary).data()[0],
            l_align: tape.value(lt.align).data()[0],
            l_total: tape.value(lt.total).data()[0],
        };
        if !row.l_total.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss at iter {}: prim={} b={} align={}",
                iter, row.l_prim, row.l_b, row.l_align
            )));
        }
        store.zero_grads();
        tape.backward(lt.total, store)?;
        let lr = tc.lr * tc.decay_gamma.powi((iter / tc.decay_every) as i32);
        store.sgd_step(lr, tc.momentum, tc.weight_decay);
        logs.push(row);

        let sp = spectral_params_from_store(store, cfg.gm.k);
        let r = sp.radii();
        let (r1, r2) = match r.len() {
            0 => (f64::NAN, f64::NAN),
            1 => (r[0], f64::NAN),
            _ => (r[0], r[1]),
        };
        radii_log.push((iter, r1, r2));

        if tc.eval_every > 0 && ((iter + 1) % tc.eval_every == 0 || iter + 1 == tc.iters) {
            let (d, _) = evaluate(store, cfg, spec, tc.eval_episodes)?;
            dice_log.push((iter + 1, d));
        }
    }
    Ok(TrainResult { logs, radii: radii_log, dice: dice_log })
}

/// Worker cap from SGP_THREADS; defaults to 1 (fully deterministic).
pub fn thread_cap() -> usize {
    std::env::var("SGP_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    K,
    T,
}

#[derive(Clone, Copy, Debug)]
pub struct AblateRow {
    pub value: usize,
    pub mean_dice: f64,
    pub std_dice: f64,
    pub mean_fp_mass: f64,
}

/// Train one model per (value, seed) and report held-out Dice,
/// parallel across runs up to [`thread_cap`].
pub fn ablate(
    axis: AblationAxis,
    values: &[usize],
    base_cfg: &ToyConfig,
    tc: &TrainConfig,
    spec: &PhantomSpec,
    seeds: &[u64],
) -> Result<Vec<AblateRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Empty("ablate needs values and seeds".into()));
    }
    let mut jobs = Vec::new();
    for (vi, &v) in values.iter().enumerate() {
        for &seed in seeds {
            let mut cfg = *base_cfg;
            match axis {
                AblationAxis::K => cfg.gm.k = v,
                AblationAxis::T => cfg.gm.t = v,
            }
            jobs.push((vi, cfg, seed));
        }
    }
    let results: Mutex<Vec<(usize, f64, f64)>> = Mutex::new(Vec::new());
    let next: Mutex<usize> = Mutex::new(0);
    let cap = thread_cap().min(jobs.len());
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for _ in 0..cap {
            handles.push(scope.spawn(|| -> Result<()> {
                loop {
                    let ji = {
                        let mut n = next.lock().unwrap();
                        let i = *n;
                        *n += 1;
                        i
                    };
                    if ji >= jobs.len() {
                        return Ok(());
                    }
                    let (vi, cfg, seed) = jobs[ji];
                    let mut store = ParamStore::new();
                    register_toy_model(&mut store, &cfg, seed)?;
                    let mut tc_run = *tc;
                    tc_run.seed = seed;
                    tc_run.eval_every = 0;
                    train(&mut store, &cfg, &tc_run, spec)?;
                    let (d, fp) = evaluate(&store, &cfg, spec, tc.eval_episodes)?;
                    results.lock().unwrap().push((vi, d, fp));
                }
            }));
        }
        for hd in handles {
            hd.join().expect("ablation worker panicked")?;
        }
        Ok(())
    })?;
    let results = results.into_inner().unwrap();
    let mut rows = Vec::with_capacity(values.len());
    for (vi, &v) in values.iter().enumerate() {
        let ds: Vec<f64> = results.iter().filter(|r| r.0 == vi).map(|r| r.1).collect();
        let fps: Vec<f64> = results.iter().filter(|r| r.0 == vi).map(|r| r.2).collect();
        let mean = ds.iter().sum::<f64>() / ds.len() as f64;
        let var = ds.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / ds.len() as f64;
        let mfp = fps.iter().sum::<f64>() / fps.len() as f64;
        rows.push(AblateRow { value: v, mean_dice: mean, std_dice: var.sqrt(), mean_fp_mass: mfp });
    }
    Ok(rows)
}

/// Cosine-only baseline: no diffusion, gate pinned to the cosine side.
pub fn make_cosine_only(store: &mut ParamStore, cfg: &mut ToyConfig) {
    cfg.gm.t = 0;
    let k = cfg.gm.k;
    store.get_mut("gm.alpha_tilde").value = Tensor::full(&[k], -30.0);
    store.set_frozen("gm.alpha_tilde", true);
}

/// End-to-end gradient check on one frozen small episode: every
/// learnable against central differences, stop-gradient respected.
pub fn episode_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let cfg = ToyConfig {
        image: 16,
        c: 4,
        enc_mid: 4,
        gm: GmConfig { t: 2, ..GmConfig::default() },
        tied_decoders: false,
    };
    let spec = PhantomSpec {
        h: 32,
        w: 32,
        organ_r: (6.0, 9.0),
        clutter: 1,
        ..PhantomSpec::default()
    };
    // render at 32 (generator minimum) and crop to 16x16 around center
    let big = gen_phantom(&spec, seed)?;
    let crop = |t: &Tensor, chan: bool| -> Tensor {
        let (h0, w0) = (32usize, 32usize);
        let side = 16usize;
        let off = 8usize;
        let shape: Vec<usize> =
            if chan { vec![1, 1, side, side] } else { vec![1, side, side] };
        let mut out = Tensor::zeros(&shape);
        for i in 0..side {
            for j in 0..side {
                out.data_mut()[i * side + j] = t.data()[(i + off) * w0 + j + off];
            }
        }
        let _ = h0;
        out
    };
    let ep = Episode {
        i_s: crop(&big.i_s, true),
        i_q: crop(&big.i_q, true),
        m_s: crop(&big.m_s, false),
        m_q: crop(&big.m_q, false),
        clutter_q: crop(&big.clutter_q, false),
        seed,
    };
    if ep.m_q.data().iter().sum::<f64>() < 8.0 || ep.m_s.data().iter().sum::<f64>() < 8.0 {
        return Err(Error::Fixture(format!("crop lost the organ (seed {})", seed)));
    }

    let mut store = ParamStore::new();
    register_toy_model(&mut store, &cfg, seed)?;

    // freeze the pseudo-mask at its baseline value so the hard
    // threshold inside the alignment term cannot flip under FD probes
    let pm = {
        let mut tape = Tape::new();
        let mut cache = TauCache::recording();
        let fwd =
            episode_forward(&mut tape, &store, &cfg, &ep.i_s, &ep.i_q, &ep.m_s, &mut cache)?;
        crate::losses::pseudo_mask(tape.value(fwd.pred))
    };

    gradcheck(
        |tape, store, cache| {
            let lt = episode_loss(tape, store, &cfg, &ep, cache, Some(&pm))?;
            Ok(lt.total)
        },
        &mut store,
        2e-5,
        true,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flood_count(mask: &Tensor) -> usize {
        let (h, w) = (mask.shape()[1], mask.shape()[2]);
        let mut seen = vec![false; h * w];
        let mut comps = 0;
        for start in 0..h * w {
            if mask.data()[start] != 1.0 || seen[start] {
                continue;
            }
            comps += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(p) = stack.pop() {
                let (i, j) = (p / w, p % w);
                for di in -1isize..=1 {
                    for dj in -1isize..=1 {
                        let (ni, nj) = (i as isize + di, j as isize + dj);
                        if ni < 0 || ni >= h as isize || nj < 0 || nj >= w as isize {
                            continue;
                        }
                        let q = (ni * w as isize + nj) as usize;
                        if mask.data()[q] == 1.0 && !seen[q] {
                            seen[q] = true;
                            stack.push(q);
                        }
                    }
                }
            }
        }
        comps
    }

    #[test]
    fn phantom_determinism_and_shape() {
        let spec = PhantomSpec::default();
        let a = gen_phantom(&spec, 42).unwrap();
        let b = gen_phantom(&spec, 42).unwrap();
        assert_eq!(a.i_s.data(), b.i_s.data());
        assert_eq!(a.i_q.data(), b.i_q.data());
        assert_eq!(a.m_q.data(), b.m_q.data());
        assert_eq!(a.i_s.shape(), &[1, 1, 64, 64]);
        assert!(a.m_s.data().iter().filter(|&&v| v == 1.0).count() >= 16);
    }

    #[test]
    fn phantom_foreground_connected_and_clutter_disjoint() {
        let spec = PhantomSpec::default();
        for seed in 0..10 {
            let ep = gen_phantom(&spec, seed).unwrap();
            assert_eq!(flood_count(&ep.m_s), 1, "seed {}", seed);
            assert_eq!(flood_count(&ep.m_q), 1, "seed {}", seed);
            // clutter never overlaps nor touches the organ
            let (h, w) = (64usize, 64usize);
            for i in 0..h {
                for j in 0..w {
                    if ep.clutter_q.data()[i * w + j] != 1.0 {
                        continue;
                    }
                    for di in -1isize..=1 {
                        for dj in -1isize..=1 {
                            let (ni, nj) = (i as isize + di, j as isize + dj);
                            if ni < 0 || ni >= h as isize || nj < 0 || nj >= w as isize {
                                continue;
                            }
                            assert_eq!(
                                ep.m_q.data()[(ni * w as isize + nj) as usize],
                                0.0,
                                "seed {}",
                                seed
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn dice_cases() {
        let mut a = Tensor::zeros(&[1, 4, 4]);
        for i in 0..4 {
            a.data_mut()[i] = 1.0;
        }
        assert_eq!(dice(&a, &a).unwrap(), 100.0);
        let mut b = Tensor::zeros(&[1, 4, 4]);
        for i in 8..12 {
            b.data_mut()[i] = 1.0;
        }
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let z = Tensor::zeros(&[1, 4, 4]);
        assert_eq!(dice(&z, &z).unwrap(), 100.0);
        // |a|=|b|=4, |inter|=2 -> 50
        let mut c = Tensor::zeros(&[1, 4, 4]);
        for i in 2..6 {
            c.data_mut()[i] = 1.0;
        }
        assert_eq!(dice(&a, &c).unwrap(), 50.0);
        assert!(dice(&a, &Tensor::zeros(&[1, 2, 2])).is_err());
        assert!(dice(&Tensor::full(&[1, 4, 4], 0.5), &z).is_err());
    }

    fn small_cfg() -> ToyConfig {
        ToyConfig {
            image: 32,
            c: 6,
            enc_mid: 4,
            gm: GmConfig { t: 2, ..GmConfig::default() },
            tied_decoders: false,
        }
    }

    fn small_spec() -> PhantomSpec {
        PhantomSpec { h: 32, w: 32, organ_r: (6.0, 9.0), clutter: 1, ..PhantomSpec::default() }
    }

    #[test]
    fn forward_prediction_is_a_distribution() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        register_toy_model(&mut store, &cfg, 1).unwrap();
        let ep = gen_phantom(&small_spec(), 3).unwrap();
        let mut tape = Tape::new();
        let mut cache = TauCache::recording();
        let fwd =
            episode_forward(&mut tape, &store, &cfg, &ep.i_s, &ep.i_q, &ep.m_s, &mut cache)
                .unwrap();
        let p = tape.value(fwd.pred);
        assert_eq!(p.shape(), &[1, 2, 32, 32]);
        assert!(p.all_finite());
        let hw = 32 * 32;
        for px in 0..hw {
            let s = p.data()[px] + p.data()[hw + px];
            assert!((s - 1.0).abs() < 1e-6);
            assert!(p.data()[px] >= 0.0 && p.data()[px] <= 1.0);
        }
    }

    #[test]
    fn tied_decoders_swap_symmetry() {
        let mut cfg = small_cfg();
        cfg.tied_decoders = true;
        let mut store = ParamStore::new();
        register_toy_model(&mut store, &cfg, 2).unwrap();
        let ep = gen_phantom(&small_spec(), 4).unwrap();
        let inv = ep.m_s.map(|v| 1.0 - v);
        let mut tape = Tape::new();
        let mut c1 = TauCache::recording();
        let f1 = episode_forward(&mut tape, &store, &cfg, &ep.i_s, &ep.i_q, &ep.m_s, &mut c1)
            .unwrap();
        let mut c2 = TauCache::recording();
        let f2 =
            episode_forward(&mut tape, &store, &cfg, &ep.i_s, &ep.i_q, &inv, &mut c2).unwrap();
        // swapping the support mask swaps the class channels
        let a = tape.value(f1.pred).clone();
        let b = tape.value(f2.pred);
        let hw = 32 * 32;
        for px in 0..hw {
            assert!((a.data()[px] - b.data()[hw + px]).abs() < 1e-9);
            assert!((a.data()[hw + px] - b.data()[px]).abs() < 1e-9);
        }
    }

    #[test]
    fn lr_zero_keeps_parameters_and_metrics_constant() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        register_toy_model(&mut store, &cfg, 5).unwrap();
        let before: Vec<Vec<f64>> =
            store.iter().map(|p| p.value.data().to_vec()).collect();
        let tc = TrainConfig {
            iters: 3,
            lr: 0.0,
            weight_decay: 0.0,
            eval_every: 1,
            eval_episodes: 1,
            ..TrainConfig::default()
        };
        let res = train(&mut store, &cfg, &tc, &small_spec()).unwrap();
        let after: Vec<Vec<f64>> = store.iter().map(|p| p.value.data().to_vec()).collect();
        assert_eq!(before, after);
        assert!(res.dice.windows(2).all(|w| w[0].1 == w[1].1));
    }

    #[test]
    fn training_is_deterministic_and_radii_stay_ordered() {
        let cfg = small_cfg();
        let tc = TrainConfig {
            iters: 5,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let run = || {
            let mut store = ParamStore::new();
            register_toy_model(&mut store, &cfg, 7).unwrap();
            train(&mut store, &cfg, &tc, &small_spec()).unwrap()
        };
        let a = run();
        let b = run();
        for (x, y) in a.logs.iter().zip(&b.logs) {
            assert_eq!(x.l_total, y.l_total);
        }
        for &(_, r1, r2) in &a.radii {
            assert!(r1 > 0.0 && r2 > r1);
        }
        assert!(a.logs.iter().all(|l| l.l_total.is_finite()));
    }

    #[test]
    fn clutter_fp_mass_counts_only_clutter() {
        let mut pred = Tensor::zeros(&[1, 2, 2, 2]);
        pred.data_mut()[4] = 0.9; // fg prob pixel 0
        pred.data_mut()[5] = 0.1;
        pred.data_mut()[6] = 0.7;
        pred.data_mut()[7] = 0.3;
        let mut clut = Tensor::zeros(&[1, 2, 2]);
        clut.data_mut()[0] = 1.0;
        clut.data_mut()[2] = 1.0;
        assert!((clutter_fp_mass(&pred, &clut) - 0.8).abs() < 1e-12);
        assert_eq!(clutter_fp_mass(&pred, &Tensor::zeros(&[1, 2, 2])), 0.0);
    }
}
