//! Decompose a feature map into radial frequency bands and pool one
//! prototype per band under a support mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use specgeo::autograd::{ParamStore, Tape};
use specgeo::fft::freq_grid;
use specgeo::spb::{
    band_masks, default_radius_targets, init_spectral_params_k, register_spectral_params,
    spb_forward, DEFAULT_BETA,
};
use specgeo::tensor::Tensor;

fn main() -> specgeo::Result<()> {
    let (c, h, w) = (8usize, 16usize, 16usize);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let feat = Tensor::new(
        vec![1, c, h, w],
        (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    // a blocky support mask over the top-left quadrant
    let mut mask = Tensor::zeros(&[1, h, w]);
    for i in 0..h / 2 {
        for j in 0..w / 2 {
            mask.data_mut()[i * w + j] = 1.0;
        }
    }

    let sp = init_spectral_params_k(&default_radius_targets(3), DEFAULT_BETA)?;
    let grid = freq_grid(h, w)?;
    println!("radii {:?} beta {:.2}", sp.radii(), sp.beta());

    // the masks partition the half spectrum
    let masks = band_masks(&sp, &grid);
    let plane = masks.len() / 3;
    let worst = (0..plane)
        .map(|p| ((0..3).map(|k| masks.data()[k * plane + p]).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    println!("partition-of-unity deviation {:.2e}", worst);

    let mut store = ParamStore::new();
    register_spectral_params(&mut store, &sp);
    let mut tape = Tape::new();
    let f = tape.constant(feat);
    let m = tape.constant(mask);
    let out = spb_forward(&mut tape, &store, f, f, m, 3, &grid);
    println!("bands {:?}", tape.value(out.bands_q).shape());
    println!("prototypes {:?}", tape.value(out.protos).shape());

    // reconstruction: the bands sum back to the input
    let bands = tape.value(out.bands_q);
    let x = tape.value(f);
    let mut max_err = 0.0f64;
    for ci in 0..c {
        for p in 0..h * w {
            let s: f64 = (0..3).map(|k| bands.data()[(ci * 3 + k) * h * w + p]).sum();
            max_err = max_err.max((s - x.data()[ci * h * w + p]).abs());
        }
    }
    println!("reconstruction error {:.2e}", max_err);
    Ok(())
}
