//! Portable artifacts: SGT tensor files (one JSON header line + raw
//! little-endian f32 payload), P5 PGM map exports, and parameter-store
//! checkpoints.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct SgtHeader {
    shape: Vec<usize>,
    dtype: String,
    order: String,
}

pub fn write_sgt(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    let header = SgtHeader {
        shape: t.shape().to_vec(),
        dtype: "f32".into(),
        order: "row-major".into(),
    };
    let line = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    f.write_all(line.as_bytes())?;
    f.write_all(b"\n")?;
    for &v in t.data() {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_sgt(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: SgtHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(e.to_string()))?;
    if header.dtype != "f32" || header.order != "row-major" {
        return Err(Error::Format(format!(
            "unsupported sgt layout: dtype={} order={}",
            header.dtype, header.order
        )));
    }
    let n: usize = header.shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::new(header.shape, data)
}

/// 8-bit P5 PGM with min-max normalisation; constant maps render as
/// mid grey.
pub fn write_pgm(path: &Path, map: &Tensor, h: usize, w: usize) -> Result<()> {
    if map.len() != h * w {
        return Err(Error::Shape(format!(
            "pgm expects {} values for {}x{}, got {}",
            h * w,
            h,
            w,
            map.len()
        )));
    }
    let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", w, h)?;
    let span = hi - lo;
    for &v in map.data() {
        let g = if span == 0.0 { 128u8 } else { ((v - lo) / span * 255.0).round() as u8 };
        f.write_all(&[g])?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
    file: String,
}

/// One SGT file per parameter plus a JSON manifest in `dir`.
pub fn save_checkpoint(dir: &Path, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::new();
    for (i, p) in store.iter().enumerate() {
        let file = format!("p{:04}.sgt", i);
        write_sgt(&dir.join(&file), &p.value)?;
        manifest.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            frozen: p.frozen,
            file,
        });
    }
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Load a checkpoint into an already-registered store; shapes must
/// match the registration exactly.
pub fn load_checkpoint(dir: &Path, store: &mut ParamStore) -> Result<()> {
    let json = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Vec<ManifestEntry> =
        serde_json::from_str(&json).map_err(|e| Error::Format(e.to_string()))?;
    for e in &manifest {
        let t = read_sgt(&dir.join(&e.file))?;
        let p = store.get_mut(&e.name);
        if p.value.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "checkpoint {}: shape {:?} vs registered {:?}",
                e.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
        p.frozen = e.frozen;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sgt_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::new(
            vec![2, 3, 4],
            (0..24).map(|_| rng.gen_range(-5.0..5.0f64)).collect(),
        )
        .unwrap();
        let path = dir.path().join("x.sgt");
        write_sgt(&path, &t).unwrap();
        let r = read_sgt(&path).unwrap();
        assert_eq!(r.shape(), t.shape());
        for (a, b) in r.data().iter().zip(t.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn pgm_header_and_range() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let path = dir.path().join("m.pgm");
        write_pgm(&path, &t, 2, 2).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let px = &bytes[header.len()..];
        assert_eq!(px, &[0u8, 255, 128, 64]);
        // constant map renders mid grey
        let c = Tensor::full(&[2, 2], 3.0);
        write_pgm(&path, &c, 2, 2).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes[header.len()..].iter().all(|&b| b == 128));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 4.5]).unwrap());
        store.add("b", Tensor::full(&[3], 0.25));
        store.set_frozen("b", true);
        save_checkpoint(dir.path(), &store).unwrap();

        let mut fresh = ParamStore::new();
        fresh.add("a.w", Tensor::zeros(&[2, 2]));
        fresh.add("b", Tensor::zeros(&[3]));
        load_checkpoint(dir.path(), &mut fresh).unwrap();
        assert_eq!(fresh.get("a.w").value.data(), store.get("a.w").value.data());
        assert!(fresh.get("b").frozen);

        let mut wrong = ParamStore::new();
        wrong.add("a.w", Tensor::zeros(&[4]));
        wrong.add("b", Tensor::zeros(&[3]));
        assert!(load_checkpoint(dir.path(), &mut wrong).is_err());
    }
}
