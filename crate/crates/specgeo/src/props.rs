//! Named invariant suite behind the `props` subcommand; each check is
//! self-contained and fast enough for a smoke run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamStore, Tape, TauCache};
use crate::episodes::{dice, gen_phantom, PhantomSpec};
use crate::error::{Error, Result};
use crate::fft::{freq_grid, irfft2, rfft2};
use crate::gm::{affinity8, diffuse_step, heat_diffuse};
use crate::oracle::{dijkstra_geo, naive_dft2, two_cluster_fixture};
use crate::spb::{band_masks, SpectralParams};
use crate::tensor::Tensor;

pub struct PropOutcome {
    pub name: &'static str,
    pub result: Result<()>,
}

fn rnd(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn check(cond: bool, msg: String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Invalid(msg))
    }
}

fn fft_round_trip() -> Result<()> {
    for &(h, w) in &[(4usize, 4usize), (5, 7), (8, 6)] {
        let x = rnd(&[1, 1, h, w], 11 + (h * w) as u64);
        let back = irfft2(&rfft2(&x)?, w)?;
        for (a, b) in x.data().iter().zip(back.data()) {
            check((a - b).abs() < 1e-10, format!("round-trip residual at {}x{}", h, w))?;
        }
        let naive = naive_dft2(&x)?;
        let fast = rfft2(&x)?;
        for i in 0..naive.re.len() {
            check(
                (naive.re[i] - fast.re[i]).abs() < 1e-9
                    && (naive.im[i] - fast.im[i]).abs() < 1e-9,
                format!("naive DFT disagreement at {}x{}", h, w),
            )?;
        }
    }
    Ok(())
}

fn partition_of_unity() -> Result<()> {
    let grid = freq_grid(16, 16)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..25 {
        let sp = SpectralParams {
            r_tilde: vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)],
            beta_tilde: rng.gen_range(-3.0..3.0),
            k: 3,
        };
        let m = band_masks(&sp, &grid);
        let plane = m.len() / 3;
        for p in 0..plane {
            let s: f64 = (0..3).map(|k| m.data()[k * plane + p]).sum();
            check((s - 1.0).abs() < 1e-9, format!("unity deviation {}", (s - 1.0).abs()))?;
        }
    }
    Ok(())
}

fn radii_ordering() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..2000 {
        let sp = SpectralParams {
            r_tilde: vec![rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)],
            beta_tilde: rng.gen_range(-50.0..50.0),
            k: 3,
        };
        let r = sp.radii();
        check(r[0] > 0.0 && r[1] > r[0], format!("ordering broke: {:?}", r))?;
    }
    Ok(())
}

fn diffusion_contracts() -> Result<()> {
    for trial in 0..20u64 {
        let mut tape = Tape::new();
        let band = tape.constant(rnd(&[1, 3, 6, 6], 50 + trial));
        let aff = affinity8(&mut tape, band, 0.5);
        let seed_t = rnd(&[1, 1, 6, 6], 80 + trial).map(|v| 0.5 + 0.5 * v);
        let lo = seed_t.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = seed_t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let seed = tape.constant(seed_t);
        let out = heat_diffuse(&mut tape, seed, aff, 5);
        for &v in tape.value(out).data() {
            check(v >= lo - 1e-12 && v <= hi + 1e-12, format!("range broke: {}", v))?;
        }
        let c = tape.constant(Tensor::full(&[1, 1, 6, 6], 0.4));
        let fixed = diffuse_step(&mut tape, c, aff);
        for &v in tape.value(fixed).data() {
            check((v - 0.4).abs() < 1e-12, format!("fixed point broke: {}", v))?;
        }
    }
    Ok(())
}

fn matcher_output_shape() -> Result<()> {
    use crate::gm::{gm_forward, register_gm_params, GmConfig};
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let c = rng.gen_range(2..6usize);
        let h = rng.gen_range(4..9usize);
        let k = 3usize;
        let mut store = ParamStore::new();
        register_gm_params(&mut store, k, c);
        let mut tape = Tape::new();
        let fq = tape.constant(rnd(&[1, c, h, h], 200));
        let bands = tape.constant(rnd(&[1, c, k, h, h], 201));
        let protos = tape.constant(rnd(&[1, c, k], 202));
        let mut cache = TauCache::recording();
        let out = gm_forward(&mut tape, &store, fq, bands, protos, &GmConfig::default(), &mut cache);
        let s = tape.value(out.matched).shape().to_vec();
        check(s == vec![1, 2 * c + k, h, h], format!("matched shape {:?}", s))?;
        let raw = tape.value(fq).data().to_vec();
        let got = tape.value(out.matched).data()[..c * h * h].to_vec();
        check(raw == got, "raw channels not byte-equal".into())?;
    }
    Ok(())
}

fn dijkstra_triangle() -> Result<()> {
    let band = rnd(&[3, 7, 7], 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..15 {
        let p = (rng.gen_range(0..7), rng.gen_range(0..7));
        let q = (rng.gen_range(0..7), rng.gen_range(0..7));
        let r = (rng.gen_range(0..7), rng.gen_range(0..7));
        let dp = dijkstra_geo(&band, &[p], 0.0)?;
        let dq = dijkstra_geo(&band, &[q], 0.0)?;
        let lhs = dp.data()[r.0 * 7 + r.1];
        let rhs = dp.data()[q.0 * 7 + q.1] + dq.data()[r.0 * 7 + r.1];
        check(lhs <= rhs + 1e-9, format!("triangle broke: {} > {}", lhs, rhs))?;
    }
    Ok(())
}

fn fixture_certificate() -> Result<()> {
    for seed in 0..5 {
        let f = two_cluster_fixture(16, 32, 2, seed)?;
        check(f.cos_b > f.cos_a, format!("certificate broke at seed {}", seed))?;
        let d = dijkstra_geo(&f.band, &f.seed_pixels(), 0.0)?;
        let da = d.data()[f.a.0 * 32 + f.a.1];
        let db = d.data()[f.b.0 * 32 + f.b.1];
        check(da < db, format!("oracle ranking broke at seed {}: {} vs {}", seed, da, db))?;
    }
    Ok(())
}

fn loss_oracles() -> Result<()> {
    use crate::losses::{nll, soft_boundary};
    let mut tape = Tape::new();
    let fg = rnd(&[1, 1, 4, 4], 9).map(|v| 0.05 + 0.45 * (v + 1.0));
    let mut pred = Tensor::zeros(&[1, 2, 4, 4]);
    for p in 0..16 {
        pred.data_mut()[p] = 1.0 - fg.data()[p];
        pred.data_mut()[16 + p] = fg.data()[p];
    }
    let mut y = Tensor::zeros(&[1, 4, 4]);
    for p in 0..16 {
        y.data_mut()[p] = (p % 3 == 0) as usize as f64;
    }
    let pv = tape.constant(pred.clone());
    let l = nll(&mut tape, pv, &y, [1.0, 1.0]);
    let mut acc = 0.0;
    for p in 0..16 {
        let yi = y.data()[p] as usize;
        acc -= pred.data()[yi * 16 + p].ln();
    }
    acc /= 16.0;
    check(
        (tape.value(l).data()[0] - acc).abs() < 1e-10,
        "nll oracle disagreement".into(),
    )?;
    let z = tape.constant(Tensor::zeros(&[1, 1, 8, 8]));
    let b = soft_boundary(&mut tape, z, 2);
    check(
        tape.value(b).data().iter().all(|&v| v == 0.0),
        "empty-mask boundary not zero".into(),
    )
}

fn dice_oracle() -> Result<()> {
    let spec = PhantomSpec::default();
    let a = gen_phantom(&spec, 21)?;
    let b = gen_phantom(&spec, 22)?;
    let d = dice(&a.m_q, &b.m_q)?;
    let inter = a
        .m_q
        .data()
        .iter()
        .zip(b.m_q.data())
        .filter(|(x, y)| **x == 1.0 && **y == 1.0)
        .count();
    let na = a.m_q.data().iter().filter(|&&v| v == 1.0).count();
    let nb = b.m_q.data().iter().filter(|&&v| v == 1.0).count();
    let expect = 2.0 * inter as f64 / (na + nb) as f64 * 100.0;
    check((d - expect).abs() < 1e-12, format!("dice {} vs oracle {}", d, expect))
}

pub fn run_all() -> Vec<PropOutcome> {
    vec![
        PropOutcome { name: "fft-round-trip-and-naive-dft", result: fft_round_trip() },
        PropOutcome { name: "band-partition-of-unity", result: partition_of_unity() },
        PropOutcome { name: "radii-strictly-increasing", result: radii_ordering() },
        PropOutcome { name: "diffusion-range-and-fixed-point", result: diffusion_contracts() },
        PropOutcome { name: "matcher-output-shape", result: matcher_output_shape() },
        PropOutcome { name: "dijkstra-triangle-inequality", result: dijkstra_triangle() },
        PropOutcome { name: "two-cluster-certificate", result: fixture_certificate() },
        PropOutcome { name: "loss-term-oracles", result: loss_oracles() },
        PropOutcome { name: "dice-set-count-oracle", result: dice_oracle() },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_props_pass() {
        for p in run_all() {
            assert!(p.result.is_ok(), "{}: {:?}", p.name, p.result);
        }
    }
}
