//! End-to-end finite-difference check: every learnable parameter of
//! the toy pipeline against central differences on a frozen episode.

use specgeo::episodes::episode_gradcheck;

fn main() -> specgeo::Result<()> {
    let report = episode_gradcheck(0)?;
    for e in &report.entries {
        println!("{:<16} max_rel_err = {:.3e}", e.name, e.max_rel_err);
    }
    println!("worst: {:.3e} (contract: <= 1e-4)", report.max_rel_err());
    Ok(())
}
