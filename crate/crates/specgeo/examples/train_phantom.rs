//! Short episodic training run on synthetic phantoms, printing the
//! loss terms, learned radii trajectory, and held-out Dice.

use specgeo::autograd::ParamStore;
use specgeo::episodes::{register_toy_model, train, PhantomSpec, ToyConfig, TrainConfig};

fn main() -> specgeo::Result<()> {
    let cfg = ToyConfig::default();
    let tc = TrainConfig { iters: 60, eval_every: 20, ..TrainConfig::default() };
    let spec = PhantomSpec::default();
    let mut store = ParamStore::new();
    register_toy_model(&mut store, &cfg, tc.seed)?;
    let res = train(&mut store, &cfg, &tc, &spec)?;
    for l in res.logs.iter().step_by(10) {
        println!(
            "iter {:3}  prim {:.3}  boundary {:.3}  align {:.3}  total {:.3}",
            l.iter, l.l_prim, l.l_b, l.l_align, l.l_total
        );
    }
    let (_, r1_0, r2_0) = res.radii[0];
    let &(_, r1_n, r2_n) = res.radii.last().unwrap();
    println!("radii: ({:.4}, {:.4}) -> ({:.4}, {:.4})", r1_0, r2_0, r1_n, r2_n);
    for (iter, d) in &res.dice {
        println!("held-out dice @ iter {:3}: {:.2}", iter, d);
    }
    Ok(())
}
