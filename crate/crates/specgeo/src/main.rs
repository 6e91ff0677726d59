use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use specgeo::autograd::{ParamStore, Tape, TauCache};
use specgeo::episodes::{
    ablate, episode_forward, episode_gradcheck, gen_phantom, register_toy_model, train,
    AblationAxis, PhantomSpec, ToyConfig, TrainConfig,
};
use specgeo::error::{Error, Result};
use specgeo::fft::freq_grid;
use specgeo::gm::{
    affinity8, gm_forward, heat_diffuse, register_gm_params, soft_seed, GmConfig,
};
use specgeo::io::{read_sgt, save_checkpoint, write_pgm, write_sgt};
use specgeo::oracle::{dijkstra_geo, two_cluster_fixture};
use specgeo::spb::{
    default_radius_targets, init_spectral_params_k, register_spectral_params, spb_forward,
    DEFAULT_BETA,
};
use specgeo::tensor::Tensor;

#[derive(Parser)]
#[command(name = "specgeo", about = "spectral band prototypes + geodesic matching")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Copy)]
struct HyperArgs {
    /// number of frequency bands
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// diffusion steps
    #[arg(long, default_value_t = 5)]
    t: usize,
    /// affinity bandwidth
    #[arg(long, default_value_t = 0.5)]
    sigma_a: f64,
    /// sigmoid/softmax sharpness
    #[arg(long, default_value_t = 20.0)]
    s: f64,
    /// seeding quantile
    #[arg(long, default_value_t = 0.85)]
    q: f64,
}

impl HyperArgs {
    fn gm(&self) -> GmConfig {
        GmConfig { k: self.k, t: self.t, sigma_a: self.sigma_a, s: self.s, q: self.q }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Decompose a feature map into frequency bands and prototypes
    SpbDecompose {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        proto: PathBuf,
        #[arg(long)]
        export_pgm: Option<PathBuf>,
        #[command(flatten)]
        hyper: HyperArgs,
    },
    /// Run the geodesic matcher on decomposed bands
    GmMatch {
        #[arg(long)]
        bands: PathBuf,
        #[arg(long)]
        protos: PathBuf,
        #[arg(long)]
        fq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_maps: Option<PathBuf>,
        #[command(flatten)]
        hyper: HyperArgs,
    },
    /// Oracle artifacts
    Oracle {
        #[command(subcommand)]
        what: OracleCmd,
    },
    /// Train the toy model on phantom episodes
    TrainToy {
        #[arg(long, default_value_t = 500)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hyper: HyperArgs,
    },
    /// Sweep K or T and report held-out Dice
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 150)]
        iters: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the named invariant suite
    Props,
    /// Finite-difference check of every learnable parameter
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export per-band activation and score maps for one episode
    ExportMaps {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hyper: HyperArgs,
    },
}

#[derive(Subcommand)]
enum OracleCmd {
    /// Dump the two-cluster fixture with heat and Dijkstra score maps
    Fixture {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn band_magnitude(bands: &Tensor, ki: usize) -> Tensor {
    // [B,C,K,h,w] -> mean |.| over B,C for band ki
    let s = bands.shape();
    let (b, c, k, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let mut out = Tensor::zeros(&[h, w]);
    for bi in 0..b {
        for ci in 0..c {
            let base = (((bi * c) + ci) * k + ki) * h * w;
            for p in 0..h * w {
                out.data_mut()[p] += bands.data()[base + p].abs();
            }
        }
    }
    out.map(|v| v / (b * c) as f64)
}

fn cmd_spb_decompose(
    input: &Path,
    mask: &Path,
    out: &Path,
    proto: &Path,
    export_pgm: Option<&Path>,
    hyper: &HyperArgs,
) -> Result<()> {
    let x = read_sgt(input)?;
    let m = read_sgt(mask)?;
    let s = x.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("--in expects [B,C,h,w], got {:?}", s)));
    }
    let mut store = ParamStore::new();
    let sp = init_spectral_params_k(&default_radius_targets(hyper.k), DEFAULT_BETA)?;
    register_spectral_params(&mut store, &sp);
    let grid = freq_grid(s[2], s[3])?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let mv = tape.constant(m);
    let o = spb_forward(&mut tape, &store, xv, xv, mv, hyper.k, &grid);
    let bands = tape.value(o.bands_q).clone();
    write_sgt(out, &bands)?;
    write_sgt(proto, tape.value(o.protos))?;
    if let Some(dir) = export_pgm {
        std::fs::create_dir_all(dir)?;
        for ki in 0..hyper.k {
            let mag = band_magnitude(&bands, ki);
            write_pgm(&dir.join(format!("band{}.pgm", ki)), &mag, s[2], s[3])?;
        }
    }
    println!("bands {:?} -> {}", bands.shape(), out.display());
    let _ = xv;
    Ok(())
}

fn cmd_gm_match(
    bands_p: &Path,
    protos_p: &Path,
    fq_p: &Path,
    out: &Path,
    dump: Option<&Path>,
    hyper: &HyperArgs,
) -> Result<()> {
    let bands = read_sgt(bands_p)?;
    let protos = read_sgt(protos_p)?;
    let fq = read_sgt(fq_p)?;
    let s = bands.shape().to_vec();
    if s.len() != 5 {
        return Err(Error::Shape(format!("--bands expects [B,C,K,h,w], got {:?}", s)));
    }
    let (c, k, h, w) = (s[1], s[2], s[3], s[4]);
    if k != hyper.k {
        return Err(Error::Invalid(format!("bands carry K={} but --k={}", k, hyper.k)));
    }
    let mut store = ParamStore::new();
    register_gm_params(&mut store, k, c);
    let mut tape = Tape::new();
    let bv = tape.constant(bands);
    let pv = tape.constant(protos);
    let fv = tape.constant(fq);
    let mut cache = TauCache::recording();
    let o = gm_forward(&mut tape, &store, fv, bv, pv, &hyper.gm(), &mut cache);
    write_sgt(out, tape.value(o.matched))?;
    if let Some(dir) = dump {
        std::fs::create_dir_all(dir)?;
        for ki in 0..k {
            for (tag, var) in [
                ("cos", o.cos_maps[ki]),
                ("seed", o.seed_maps[ki]),
                ("geo", o.geo_maps[ki]),
            ] {
                let m = tape.value(var);
                let flat = Tensor::new(vec![h, w], m.data()[..h * w].to_vec())?;
                write_pgm(&dir.join(format!("{}{}.pgm", tag, ki)), &flat, h, w)?;
            }
            let sc = tape.value(o.scores);
            let flat = Tensor::new(vec![h, w], sc.data()[ki * h * w..(ki + 1) * h * w].to_vec())?;
            write_pgm(&dir.join(format!("score{}.pgm", ki)), &flat, h, w)?;
            let wv = tape.value(o.blend_weights);
            let flat = Tensor::new(vec![h, w], wv.data()[ki * h * w..(ki + 1) * h * w].to_vec())?;
            write_pgm(&dir.join(format!("weight{}.pgm", ki)), &flat, h, w)?;
        }
    }
    println!("matched {:?} -> {}", tape.value(o.matched).shape(), out.display());
    Ok(())
}

fn cmd_oracle_fixture(seed: u64, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let f = two_cluster_fixture(16, 32, 2, seed)?;
    let (h, w) = (16usize, 32usize);
    write_sgt(&out.join("band.sgt"), &f.band)?;
    let cos = f.cosine_map();
    let cos_flat = Tensor::new(vec![h, w], cos.data().to_vec())?;
    write_sgt(&out.join("cosine.sgt"), &cos_flat)?;
    write_pgm(&out.join("cosine.pgm"), &cos_flat, h, w)?;

    // heat score via the matcher primitives at defaults
    let mut tape = Tape::new();
    let band4 = Tensor::new(vec![1, 4, h, w], f.band.data().to_vec())?;
    let bv = tape.constant(band4);
    let cv = tape.constant(cos);
    let mut cache = TauCache::recording();
    let seed_map = soft_seed(&mut tape, cv, 0.85, 20.0, &mut cache);
    let aff = affinity8(&mut tape, bv, 0.5);
    let geo = heat_diffuse(&mut tape, seed_map, aff, 5);
    let heat = Tensor::new(vec![h, w], tape.value(geo).data().to_vec())?;
    write_sgt(&out.join("heat.sgt"), &heat)?;
    write_pgm(&out.join("heat.pgm"), &heat, h, w)?;

    let d = dijkstra_geo(&f.band, &f.seed_pixels(), 0.0)?;
    write_sgt(&out.join("dijkstra.sgt"), &d)?;
    write_pgm(&out.join("dijkstra.pgm"), &d, h, w)?;

    let heat_a = heat.data()[f.a.0 * w + f.a.1];
    let heat_b = heat.data()[f.b.0 * w + f.b.1];
    let d_a = d.data()[f.a.0 * w + f.a.1];
    let d_b = d.data()[f.b.0 * w + f.b.1];
    println!(
        "cos(A)={:.4} cos(B)={:.4} heat(A)={:.4e} heat(B)={:.4e} d(A)={:.3} d(B)={:.3}",
        f.cos_a, f.cos_b, heat_a, heat_b, d_a, d_b
    );
    Ok(())
}

fn cmd_train_toy(iters: usize, seed: u64, lr: f64, out: &Path, hyper: &HyperArgs) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let cfg = ToyConfig { gm: hyper.gm(), ..ToyConfig::default() };
    let tc = TrainConfig { iters, seed, lr, ..TrainConfig::default() };
    let mut store = ParamStore::new();
    register_toy_model(&mut store, &cfg, seed)?;
    let res = train(&mut store, &cfg, &tc, &PhantomSpec::default())?;
    let mut metrics = String::new();
    for l in &res.logs {
        metrics.push_str(&serde_json::to_string(l).map_err(|e| Error::Format(e.to_string()))?);
        metrics.push('\n');
    }
    std::fs::write(out.join("metrics.jsonl"), metrics)?;
    let mut csv = String::from("iter,r1,r2\n");
    for &(i, r1, r2) in &res.radii {
        csv.push_str(&format!("{},{},{}\n", i, r1, r2));
    }
    std::fs::write(out.join("radii.csv"), csv)?;
    save_checkpoint(&out.join("ckpt"), &store)?;
    let last = res.logs.last().unwrap();
    let dice = res.dice.last().map(|d| d.1).unwrap_or(f64::NAN);
    println!("iters={} final_total={:.4} heldout_dice={:.2}", iters, last.l_total, dice);
    Ok(())
}

fn cmd_ablate(
    axis: &str,
    values: &[usize],
    seeds: u64,
    iters: usize,
    out: Option<&Path>,
) -> Result<()> {
    let axis = match axis {
        "K" | "k" => AblationAxis::K,
        "T" | "t" => AblationAxis::T,
        other => return Err(Error::Invalid(format!("unknown axis {:?}, use K or T", other))),
    };
    let cfg = ToyConfig::default();
    let tc = TrainConfig { iters, ..TrainConfig::default() };
    let seed_list: Vec<u64> = (0..seeds).collect();
    let rows = ablate(axis, values, &cfg, &tc, &PhantomSpec::default(), &seed_list)?;
    let mut lines = String::new();
    for r in &rows {
        let line = format!(
            "{:?}={} dice={:.2}+-{:.2} fp_mass={:.4}",
            axis, r.value, r.mean_dice, r.std_dice, r.mean_fp_mass
        );
        println!("{}", line);
        lines.push_str(&line);
        lines.push('\n');
    }
    if let Some(p) = out {
        std::fs::write(p, lines)?;
    }
    Ok(())
}

fn cmd_props() -> Result<()> {
    let mut failed = false;
    for p in specgeo::props::run_all() {
        match p.result {
            Ok(()) => println!("PASS {}", p.name),
            Err(e) => {
                println!("FAIL {}: {}", p.name, e);
                failed = true;
            }
        }
    }
    if failed {
        Err(Error::Invalid("property suite failed".into()))
    } else {
        Ok(())
    }
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let report = episode_gradcheck(seed)?;
    for e in &report.entries {
        println!(
            "{:<16} max_rel_err={:.3e}{}",
            e.name,
            e.max_rel_err,
            if e.frozen { " (frozen)" } else { "" }
        );
    }
    let worst = report.max_rel_err();
    println!("worst {:.3e}", worst);
    if worst <= 1e-4 {
        Ok(())
    } else {
        Err(Error::Autograd(format!("gradcheck exceeded 1e-4: {:.3e}", worst)))
    }
}

fn cmd_export_maps(seed: u64, out: &Path, hyper: &HyperArgs) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let cfg = ToyConfig { gm: hyper.gm(), ..ToyConfig::default() };
    let mut store = ParamStore::new();
    register_toy_model(&mut store, &cfg, seed)?;
    let ep = gen_phantom(&PhantomSpec::default(), seed)?;
    let mut tape = Tape::new();
    let mut cache = TauCache::recording();
    let fwd = episode_forward(&mut tape, &store, &cfg, &ep.i_s, &ep.i_q, &ep.m_s, &mut cache)?;
    let hs = cfg.feat();
    let bands = tape.value(fwd.spb_fg.bands_q).clone();
    let names = ["low", "mid", "high"];
    for ki in 0..cfg.gm.k {
        let mag = band_magnitude(&bands, ki);
        let name = if cfg.gm.k == 3 { names[ki].to_string() } else { format!("band{}", ki) };
        write_pgm(&out.join(format!("{}.pgm", name)), &mag, hs, hs)?;
    }
    for ki in 0..cfg.gm.k {
        let sc = tape.value(fwd.gm_fg.scores);
        let flat = Tensor::new(vec![hs, hs], sc.data()[ki * hs * hs..(ki + 1) * hs * hs].to_vec())?;
        write_pgm(&out.join(format!("score{}.pgm", ki)), &flat, hs, hs)?;
    }
    let pred = tape.value(fwd.pred);
    let hw = cfg.image * cfg.image;
    let fg = Tensor::new(vec![cfg.image, cfg.image], pred.data()[hw..2 * hw].to_vec())?;
    write_pgm(&out.join("pred_fg.pgm"), &fg, cfg.image, cfg.image)?;
    println!("wrote {} maps to {}", cfg.gm.k * 2 + 1, out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::SpbDecompose { input, mask, out, proto, export_pgm, hyper } => {
            cmd_spb_decompose(&input, &mask, &out, &proto, export_pgm.as_deref(), &hyper)
        }
        Cmd::GmMatch { bands, protos, fq, out, dump_maps, hyper } => {
            cmd_gm_match(&bands, &protos, &fq, &out, dump_maps.as_deref(), &hyper)
        }
        Cmd::Oracle { what } => match what {
            OracleCmd::Fixture { seed, out } => cmd_oracle_fixture(seed, &out),
        },
        Cmd::TrainToy { iters, seed, lr, out, hyper } => {
            cmd_train_toy(iters, seed, lr, &out, &hyper)
        }
        Cmd::Ablate { axis, values, seeds, iters, out } => {
            cmd_ablate(&axis, &values, seeds, iters, out.as_deref())
        }
        Cmd::Props => cmd_props(),
        Cmd::Gradcheck { seed } => cmd_gradcheck(seed),
        Cmd::ExportMaps { seed, out, hyper } => cmd_export_maps(seed, &out, &hyper),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
