//! Tiny K/T ablation on phantoms. Set SGP_THREADS to parallelise the
//! runs; results are deterministic either way.

use specgeo::episodes::{ablate, AblationAxis, PhantomSpec, ToyConfig, TrainConfig};

fn main() -> specgeo::Result<()> {
    let cfg = ToyConfig::default();
    let tc = TrainConfig { iters: 60, eval_episodes: 3, ..TrainConfig::default() };
    let spec = PhantomSpec::default();
    for (axis, values) in [(AblationAxis::T, vec![0usize, 5]), (AblationAxis::K, vec![1, 3])] {
        let rows = ablate(axis, &values, &cfg, &tc, &spec, &[0, 1])?;
        for r in rows {
            println!(
                "{:?}={}  dice {:.2} +- {:.2}  clutter fp mass {:.4}",
                axis, r.value, r.mean_dice, r.std_dice, r.mean_fp_mass
            );
        }
    }
    Ok(())
}
