//! Export per-band activation magnitudes, score maps, and the
//! foreground prediction for one phantom episode as PGM images.

use specgeo::autograd::{ParamStore, Tape, TauCache};
use specgeo::episodes::{episode_forward, gen_phantom, register_toy_model, PhantomSpec, ToyConfig};
use specgeo::io::write_pgm;
use specgeo::tensor::Tensor;

fn main() -> specgeo::Result<()> {
    let out = std::env::temp_dir().join("specgeo_maps");
    std::fs::create_dir_all(&out)?;
    let cfg = ToyConfig::default();
    let mut store = ParamStore::new();
    register_toy_model(&mut store, &cfg, 0)?;
    let ep = gen_phantom(&PhantomSpec::default(), 0)?;
    let mut tape = Tape::new();
    let mut cache = TauCache::recording();
    let fwd = episode_forward(&mut tape, &store, &cfg, &ep.i_s, &ep.i_q, &ep.m_s, &mut cache)?;

    let hs = cfg.feat();
    let bands = tape.value(fwd.spb_fg.bands_q);
    for (ki, name) in ["low", "mid", "high"].iter().enumerate() {
        let mut mag = Tensor::zeros(&[hs, hs]);
        for ci in 0..cfg.c {
            let base = (ci * cfg.gm.k + ki) * hs * hs;
            for p in 0..hs * hs {
                mag.data_mut()[p] += bands.data()[base + p].abs();
            }
        }
        let path = out.join(format!("{}.pgm", name));
        write_pgm(&path, &mag, hs, hs)?;
        println!("wrote {}", path.display());
    }
    let pred = tape.value(fwd.pred);
    let hw = cfg.image * cfg.image;
    let fg = Tensor::new(vec![cfg.image, cfg.image], pred.data()[hw..2 * hw].to_vec())?;
    let path = out.join("pred_fg.pgm");
    write_pgm(&path, &fg, cfg.image, cfg.image)?;
    println!("wrote {}", path.display());
    Ok(())
}
