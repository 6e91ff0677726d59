//! Orthonormal 2-D real FFT over [B,C,h,w] tensors, with the matching
//! half-spectrum representation and frequency grids.
//!
//! Forward and inverse each carry a 1/sqrt(h*w) factor, so the pair is
//! unitary and Parseval holds with duplication weights on the columns
//! the half-spectrum does not store. Arbitrary (non power of two)
//! sizes are supported via the planner's mixed-radix/Bluestein paths.

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Half spectrum of a real [B,C,h,w] tensor: w_r = floor(w/2)+1 columns.
#[derive(Clone, Debug)]
pub struct HalfSpectrum {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w_r: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl HalfSpectrum {
    pub fn zeros(batch: usize, channels: usize, h: usize, w_r: usize) -> Self {
        let n = batch * channels * h * w_r;
        HalfSpectrum { batch, channels, h, w_r, re: vec![0.0; n], im: vec![0.0; n] }
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w_r
    }

    /// Spectral L2 energy with conjugate-symmetric duplication weights.
    pub fn energy(&self, w: usize) -> f64 {
        let mut e = 0.0;
        let planes = self.batch * self.channels;
        for p in 0..planes {
            let base = p * self.plane_len();
            for u in 0..self.h {
                for v in 0..self.w_r {
                    let i = base + u * self.w_r + v;
                    let mag2 = self.re[i] * self.re[i] + self.im[i] * self.im[i];
                    e += duplication_weight(v, w) * mag2;
                }
            }
        }
        e
    }
}

/// Weight of column v when summing half-spectrum energy: stored-once
/// columns that stand for a conjugate pair count twice.
pub fn duplication_weight(v: usize, w: usize) -> f64 {
    if v == 0 || (w % 2 == 0 && v == w / 2) {
        1.0
    } else {
        2.0
    }
}

/// Discrete normalised frequency grid for an h x w real transform.
#[derive(Clone, Debug)]
pub struct FreqGrid {
    pub nu_y: Vec<f64>,
    pub nu_x: Vec<f64>,
    /// rho[u * w_r + v] = sqrt(nu_y[u]^2 + nu_x[v]^2)
    pub rho: Vec<f64>,
    pub h: usize,
    pub w_r: usize,
}

/// fftfreq convention for rows, rfftfreq for columns.
pub fn freq_grid(h: usize, w: usize) -> Result<FreqGrid> {
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("freq_grid needs h,w >= 2, got {}x{}", h, w)));
    }
    let w_r = w / 2 + 1;
    let nu_y: Vec<f64> = (0..h)
        .map(|k| {
            if k < h.div_ceil(2) {
                k as f64 / h as f64
            } else {
                (k as f64 - h as f64) / h as f64
            }
        })
        .collect();
    let nu_x: Vec<f64> = (0..w_r).map(|v| v as f64 / w as f64).collect();
    let mut rho = vec![0.0; h * w_r];
    for u in 0..h {
        for v in 0..w_r {
            rho[u * w_r + v] = (nu_y[u] * nu_y[u] + nu_x[v] * nu_x[v]).sqrt();
        }
    }
    Ok(FreqGrid { nu_y, nu_x, rho, h, w_r })
}

fn check_spatial(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!("expected [B,C,h,w], got {:?}", x.shape())));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("spatial dims must be >= 2, got {}x{}", h, w)));
    }
    Ok((b, c, h, w))
}

/// Orthonormal 2-D real-input FFT: rows first, then columns of the
/// retained half spectrum.
pub fn rfft2(x: &Tensor) -> Result<HalfSpectrum> {
    let (b, c, h, w) = check_spatial(x)?;
    let w_r = w / 2 + 1;
    let (row_fft, col_fft) = PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    });
    let scale = 1.0 / ((h * w) as f64).sqrt();

    let mut out = HalfSpectrum::zeros(b, c, h, w_r);
    let mut row = vec![Complex::new(0.0, 0.0); w];
    let mut col = vec![Complex::new(0.0, 0.0); h];
    let mut half = vec![Complex::new(0.0, 0.0); h * w_r];
    for p in 0..b * c {
        let base = p * h * w;
        for u in 0..h {
            for j in 0..w {
                row[j] = Complex::new(x.data()[base + u * w + j], 0.0);
            }
            row_fft.process(&mut row);
            for v in 0..w_r {
                half[u * w_r + v] = row[v];
            }
        }
        for v in 0..w_r {
            for u in 0..h {
                col[u] = half[u * w_r + v];
            }
            col_fft.process(&mut col);
            let obase = p * h * w_r;
            for u in 0..h {
                out.re[obase + u * w_r + v] = col[u].re * scale;
                out.im[obase + u * w_r + v] = col[u].im * scale;
            }
        }
    }
    Ok(out)
}

/// Orthonormal inverse of [`rfft2`]; `w` disambiguates the even/odd
/// width folded into w_r.
pub fn irfft2(spec: &HalfSpectrum, w: usize) -> Result<Tensor> {
    let (b, c, h, w_r) = (spec.batch, spec.channels, spec.h, spec.w_r);
    if w / 2 + 1 != w_r || w < 2 || h < 2 {
        return Err(Error::Shape(format!(
            "irfft2: width {} inconsistent with w_r {}",
            w, w_r
        )));
    }
    let (col_ifft, row_ifft) = PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        (planner.plan_fft_inverse(h), planner.plan_fft_inverse(w))
    });
    let scale = 1.0 / ((h * w) as f64).sqrt();

    let mut out = vec![0.0; b * c * h * w];
    let mut col = vec![Complex::new(0.0, 0.0); h];
    let mut row = vec![Complex::new(0.0, 0.0); w];
    let mut half = vec![Complex::new(0.0, 0.0); h * w_r];
    for p in 0..b * c {
        let sbase = p * h * w_r;
        // undo the column transform
        for v in 0..w_r {
            for u in 0..h {
                let i = sbase + u * w_r + v;
                col[u] = Complex::new(spec.re[i], spec.im[i]);
            }
            col_ifft.process(&mut col);
            for u in 0..h {
                half[u * w_r + v] = col[u];
            }
        }
        // rebuild full rows by conjugate symmetry, then invert
        let obase = p * h * w;
        for u in 0..h {
            for v in 0..w_r {
                row[v] = half[u * w_r + v];
            }
            for v in w_r..w {
                row[v] = half[u * w_r + (w - v)].conj();
            }
            row_ifft.process(&mut row);
            for j in 0..w {
                out[obase + u * w + j] = row[j].re * scale;
            }
        }
    }
    Tensor::new(vec![b, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn constant_map_is_dc_only() {
        let c = 0.7;
        let x = Tensor::full(&[1, 1, 4, 4], c);
        let s = rfft2(&x).unwrap();
        // c * 16 / sqrt(16) = 4c at DC
        assert!((s.re[0] - 4.0 * c).abs() < 1e-12);
        for i in 1..s.re.len() {
            assert!(s.re[i].abs() < 1e-12 && s.im[i].abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut x = Tensor::zeros(&[1, 1, 6, 5]);
        x.data_mut()[0] = 1.0;
        let s = rfft2(&x).unwrap();
        let expect = 1.0 / 30.0_f64.sqrt();
        for i in 0..s.re.len() {
            assert!((s.re[i] - expect).abs() < 1e-12);
            assert!(s.im[i].abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_identity() {
        for (h, w) in [(8, 8), (5, 7), (3, 4)] {
            let x = random_tensor(&[2, 3, h, w], 42);
            let y = irfft2(&rfft2(&x).unwrap(), w).unwrap();
            for (a, b) in x.data().iter().zip(y.data()) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn zero_spectrum_gives_zero_tensor() {
        let s = HalfSpectrum::zeros(1, 1, 4, 3);
        let x = irfft2(&s, 4).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkerboard_round_trip_through_spectrum() {
        let mut x = Tensor::zeros(&[1, 1, 8, 8]);
        for i in 0..8 {
            for j in 0..8 {
                x.data_mut()[i * 8 + j] = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            }
        }
        let y = irfft2(&rfft2(&x).unwrap(), 8).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn parseval_under_orthonormal_scaling() {
        for (h, w) in [(8, 8), (5, 6), (7, 3)] {
            let x = random_tensor(&[1, 2, h, w], 7);
            let spatial: f64 = x.data().iter().map(|v| v * v).sum();
            let spectral = rfft2(&x).unwrap().energy(w);
            assert!(
                (spatial - spectral).abs() / spatial < 1e-9,
                "h={} w={}: {} vs {}",
                h,
                w,
                spatial,
                spectral
            );
        }
    }

    #[test]
    fn freq_grid_convention() {
        let g = freq_grid(4, 4).unwrap();
        assert_eq!(g.nu_y, vec![0.0, 0.25, -0.5, -0.25]);
        assert_eq!(g.nu_x, vec![0.0, 0.25, 0.5]);
        assert_eq!(g.rho[0], 0.0);
        let expect = (0.25f64 * 0.25 + 0.25 * 0.25).sqrt();
        assert!((g.rho[1 * g.w_r + 1] - expect).abs() < 1e-12);
        assert!(g.rho.iter().all(|&r| r >= 0.0));
        assert!(freq_grid(1, 4).is_err());
    }

    #[test]
    fn inconsistent_width_errors() {
        let s = HalfSpectrum::zeros(1, 1, 4, 3);
        assert!(irfft2(&s, 7).is_err());
        assert!(rfft2(&Tensor::zeros(&[1, 1, 1, 4])).is_err());
    }
}
