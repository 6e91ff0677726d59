//! Training objective: class-weighted NLL, soft-morphology boundary
//! loss, role-swapped alignment loss, and their unweighted sum.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const IGNORE: f64 = 255.0;
pub const THETA0: usize = 3;
pub const THETA: usize = 5;
pub const FG_WEIGHT_CAP: f64 = 20.0;

/// Background weight 1, foreground weight |bg|/|fg| capped at 20,
/// counted over the non-ignore pixels of `y`.
pub fn class_weights(y: &Tensor) -> [f64; 2] {
    let mut fg = 0usize;
    let mut bg = 0usize;
    for &v in y.data() {
        if v == 1.0 {
            fg += 1;
        } else if v == 0.0 {
            bg += 1;
        }
    }
    if fg == 0 {
        return [1.0, FG_WEIGHT_CAP];
    }
    [1.0, (bg as f64 / fg as f64).min(FG_WEIGHT_CAP)]
}

/// Class-weighted NLL over non-ignore pixels; pred is [B,2,H,W]
/// probabilities, y holds {0, 1, 255}.
pub fn nll(tape: &mut Tape, pred: Var, y: &Tensor, w: [f64; 2]) -> Var {
    tape.nll_weighted(pred, y, w)
}

/// Soft boundary band: grey dilation minus grey erosion with a
/// (2 theta + 1)-square window, replicate padding.
pub fn soft_boundary(tape: &mut Tape, mask: Var, theta: usize) -> Var {
    assert!(theta >= 1);
    let k = 2 * theta + 1;
    let d = tape.max_pool(mask, k);
    let e = tape.min_pool(mask, k);
    tape.sub(d, e)
}

/// Mean squared gap between the predicted boundary band (radius
/// theta0) and the label boundary band (radius theta).
pub fn boundary_loss(
    tape: &mut Tape,
    pred_fg: Var,
    y_fg: Var,
    theta0: usize,
    theta: usize,
) -> Var {
    let bp = soft_boundary(tape, pred_fg, theta0);
    let by = soft_boundary(tape, y_fg, theta);
    let diff = tape.sub(bp, by);
    let sq = tape.mul(diff, diff);
    tape.mean_all(sq)
}

/// Hard-threshold the foreground channel at 0.5. A prediction with no
/// positive pixels is replaced by a uniform 0.5 mask so the swapped
/// pass stays well-defined. Value-only: no gradient flows through.
pub fn pseudo_mask(pred: &Tensor) -> Tensor {
    let (b, h, w) = (pred.shape()[0], pred.shape()[2], pred.shape()[3]);
    let hw = h * w;
    let mut out = Tensor::zeros(&[b, 1, h, w]);
    let mut any = false;
    for bi in 0..b {
        for p in 0..hw {
            if pred.data()[(bi * 2 + 1) * hw + p] > 0.5 {
                out.data_mut()[bi * hw + p] = 1.0;
                any = true;
            }
        }
    }
    if !any {
        out = Tensor::full(&[b, 1, h, w], 0.5);
    }
    out
}

/// Binary foreground target from a label map: ignore pixels count as
/// background for the morphology band.
pub fn fg_target(y: &Tensor) -> Tensor {
    let (b, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let mut t = Tensor::zeros(&[b, 1, h, w]);
    for (o, &v) in t.data_mut().iter_mut().zip(y.data()) {
        *o = if v == 1.0 { 1.0 } else { 0.0 };
    }
    t
}

/// Role-swapped alignment term. The caller supplies the swapped
/// forward pass (query acting as support, conditioned on the pseudo
/// mask); this evaluates L_prim + L_b of that pass against the support
/// labels.
pub fn align_loss<F>(tape: &mut Tape, pred_q: Var, y_s: &Tensor, forward_swapped: F) -> Result<Var>
where
    F: FnOnce(&mut Tape, &Tensor) -> Result<Var>,
{
    let pm = pseudo_mask(tape.value(pred_q));
    let pred_s = forward_swapped(tape, &pm)?;
    let w = class_weights(y_s);
    let l_prim = nll(tape, pred_s, y_s, w);
    let fg = tape.select(pred_s, 1, 1); // [B,1,H,W]
    let yt = tape.constant(fg_target(y_s));
    let l_b = boundary_loss(tape, fg, yt, THETA0, THETA);
    Ok(tape.add(l_prim, l_b))
}

/// Eq-style unweighted sum of the three terms.
pub fn total_loss(tape: &mut Tape, prim: Var, b: Var, align: Var) -> Var {
    let pb = tape.add(prim, b);
    tape.add(pb, align)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{gradcheck, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rnd01(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn two_class(fg: &Tensor) -> Tensor {
        let (b, h, w) = (fg.shape()[0], fg.shape()[2], fg.shape()[3]);
        let hw = h * w;
        let mut t = Tensor::zeros(&[b, 2, h, w]);
        for bi in 0..b {
            for p in 0..hw {
                let f = fg.data()[bi * hw + p];
                t.data_mut()[(bi * 2) * hw + p] = 1.0 - f;
                t.data_mut()[(bi * 2 + 1) * hw + p] = f;
            }
        }
        t
    }

    #[test]
    fn nll_examples() {
        let mut tape = Tape::new();
        // prob 1 on every true label -> 0
        let y = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let mut p = Tensor::zeros(&[1, 2, 1, 2]);
        p.data_mut()[0] = 1.0; // bg prob at pixel 0
        p.data_mut()[3] = 1.0; // fg prob at pixel 1
        let pv = tape.constant(p);
        let l = nll(&mut tape, pv, &y, [1.0, 1.0]);
        assert_eq!(tape.value(l).data()[0], 0.0);

        // single pixel, y=1, pred_fg=0.5 -> ln 2
        let y = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let p = Tensor::new(vec![1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
        let pv = tape.constant(p);
        let l = nll(&mut tape, pv, &y, [1.0, 1.0]);
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

        // all ignore -> 0
        let y = Tensor::new(vec![1, 2, 2], vec![255.0; 4]).unwrap();
        let pv = tape.constant(rnd01(&[1, 2, 2, 2], 1));
        let l = nll(&mut tape, pv, &y, [1.0, 3.0]);
        assert_eq!(tape.value(l).data()[0], 0.0);
    }

    #[test]
    fn nll_matches_plain_cross_entropy_oracle() {
        let fg = rnd01(&[2, 1, 4, 4], 2).map(|v| 0.05 + 0.9 * v);
        let pred = two_class(&fg);
        let mut y = Tensor::zeros(&[2, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in y.data_mut() {
            *v = if rng.gen_bool(0.4) { 1.0 } else { 0.0 };
        }
        let mut tape = Tape::new();
        let pv = tape.constant(pred.clone());
        let l = nll(&mut tape, pv, &y, [1.0, 1.0]);
        // independent per-pixel cross-entropy
        let hw = 16;
        let mut acc = 0.0;
        for bi in 0..2 {
            for p in 0..hw {
                let yi = y.data()[bi * hw + p] as usize;
                acc -= pred.data()[(bi * 2 + yi) * hw + p].ln();
            }
        }
        acc /= 32.0;
        assert!((tape.value(l).data()[0] - acc).abs() < 1e-10);
    }

    #[test]
    fn class_weight_rule() {
        // 12 bg, 4 fg -> fg weight 3
        let mut y = Tensor::zeros(&[1, 4, 4]);
        for i in 0..4 {
            y.data_mut()[i] = 1.0;
        }
        assert_eq!(class_weights(&y), [1.0, 3.0]);
        // one fg pixel in 64 -> capped at 20
        let mut y = Tensor::zeros(&[1, 8, 8]);
        y.data_mut()[0] = 1.0;
        assert_eq!(class_weights(&y), [1.0, 20.0]);
        // no fg -> cap
        let y = Tensor::zeros(&[1, 4, 4]);
        assert_eq!(class_weights(&y), [1.0, 20.0]);
    }

    /// Naive stride-1 replicate-pad pooling for the oracle.
    fn pool_oracle(m: &Tensor, k: usize, is_max: bool) -> Tensor {
        let (h, w) = (m.shape()[2], m.shape()[3]);
        let r = (k / 2) as isize;
        let mut out = m.clone();
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut best = if is_max { f64::NEG_INFINITY } else { f64::INFINITY };
                for di in -r..=r {
                    for dj in -r..=r {
                        let si = (i + di).clamp(0, h as isize - 1) as usize;
                        let sj = (j + dj).clamp(0, w as isize - 1) as usize;
                        let v = m.data()[si * w + sj];
                        best = if is_max { best.max(v) } else { best.min(v) };
                    }
                }
                out.data_mut()[(i * w as isize + j) as usize] = best;
            }
        }
        out
    }

    fn centered_square(n: usize, side: usize) -> Tensor {
        let mut m = Tensor::zeros(&[1, 1, n, n]);
        let lo = (n - side) / 2;
        for i in lo..lo + side {
            for j in lo..lo + side {
                m.data_mut()[i * n + j] = 1.0;
            }
        }
        m
    }

    #[test]
    fn soft_boundary_cases() {
        let mut tape = Tape::new();
        // all-zero and all-one masks give zero bands under replicate pad
        for fill in [0.0, 1.0] {
            let m = tape.constant(Tensor::full(&[1, 1, 8, 8], fill));
            let b = soft_boundary(&mut tape, m, 2);
            assert!(tape.value(b).data().iter().all(|&v| v == 0.0));
        }

        // centered 4x4 square in 16x16, theta=1: matches pooling oracle
        let sq = centered_square(16, 4);
        let mv = tape.constant(sq.clone());
        let b = soft_boundary(&mut tape, mv, 1);
        let oracle = {
            let d = pool_oracle(&sq, 3, true);
            let e = pool_oracle(&sq, 3, false);
            Tensor::new(
                d.shape().to_vec(),
                d.data().iter().zip(e.data()).map(|(a, b)| a - b).collect(),
            )
            .unwrap()
        };
        assert_eq!(tape.value(b).data(), oracle.data());
        // band is a ring of width 2 straddling the square edge
        let bv = tape.value(b);
        assert_eq!(bv.data()[5 * 16 + 5], 1.0); // just inside the corner
        assert_eq!(bv.data()[7 * 16 + 7], 0.0); // square interior
        assert_eq!(bv.data()[16 + 1], 0.0); // far background
    }

    #[test]
    fn soft_boundary_translation_equivariant() {
        let mut tape = Tape::new();
        let a = centered_square(16, 4);
        let mut b = Tensor::zeros(&[1, 1, 16, 16]);
        for i in 0..16 {
            for j in 0..16 {
                if i >= 2 && j >= 3 && a.data()[(i - 2) * 16 + j - 3] == 1.0 {
                    b.data_mut()[i * 16 + j] = 1.0;
                }
            }
        }
        let av = tape.constant(a);
        let bv = tape.constant(b);
        let ba = soft_boundary(&mut tape, av, 1);
        let bb = soft_boundary(&mut tape, bv, 1);
        let bav = tape.value(ba).clone();
        let bbv = tape.value(bb).clone();
        for i in 2..14 {
            for j in 3..14 {
                assert_eq!(bav.data()[(i - 2) * 16 + j - 3], bbv.data()[i * 16 + j]);
            }
        }
    }

    #[test]
    fn boundary_loss_cases() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 1, 16, 16]));
        let l = boundary_loss(&mut tape, z, z, 3, 5);
        assert_eq!(tape.value(l).data()[0], 0.0);

        // identical square masks still pay for the band-width mismatch
        let sq = centered_square(16, 6);
        let p = tape.constant(sq.clone());
        let y = tape.constant(sq.clone());
        let l = boundary_loss(&mut tape, p, y, 3, 5);
        // oracle on values
        let bp = {
            let d = pool_oracle(&sq, 7, true);
            let e = pool_oracle(&sq, 7, false);
            d.data().iter().zip(e.data()).map(|(a, b)| a - b).collect::<Vec<_>>()
        };
        let by = {
            let d = pool_oracle(&sq, 11, true);
            let e = pool_oracle(&sq, 11, false);
            d.data().iter().zip(e.data()).map(|(a, b)| a - b).collect::<Vec<_>>()
        };
        let expect: f64 =
            bp.iter().zip(&by).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 256.0;
        assert!(expect > 0.0);
        assert!((tape.value(l).data()[0] - expect).abs() < 1e-12);

        // uniform 0.5 prediction has a zero band; loss = mean B_theta(y)^2
        let half = tape.constant(Tensor::full(&[1, 1, 16, 16], 0.5));
        let y = tape.constant(sq);
        let l = boundary_loss(&mut tape, half, y, 3, 5);
        let expect: f64 = by.iter().map(|b| b * b).sum::<f64>() / 256.0;
        assert!((tape.value(l).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn pseudo_mask_threshold_and_fallback() {
        let p = Tensor::new(
            vec![1, 2, 1, 3],
            vec![0.8, 0.3, 0.5, 0.2, 0.7, 0.5],
        )
        .unwrap();
        let m = pseudo_mask(&p);
        assert_eq!(m.data(), &[0.0, 1.0, 0.0]);
        // everywhere <= 0.5 -> uniform 0.5
        let p = Tensor::new(vec![1, 2, 1, 2], vec![0.6, 0.5, 0.4, 0.5]).unwrap();
        let m = pseudo_mask(&p);
        assert_eq!(m.data(), &[0.5, 0.5]);
    }

    #[test]
    fn total_loss_sums() {
        let mut tape = Tape::new();
        let a = tape.scalar(1.0);
        let b = tape.scalar(2.0);
        let c = tape.scalar(3.0);
        let t = total_loss(&mut tape, a, b, c);
        assert_eq!(tape.value(t).data()[0], 6.0);
        let z = tape.scalar(0.0);
        let t = total_loss(&mut tape, z, z, z);
        assert_eq!(tape.value(t).data()[0], 0.0);
    }

    #[test]
    fn loss_pipeline_gradcheck() {
        // smooth input through sigmoid keeps pooling argmax stable
        let mut store = ParamStore::new();
        store.add("logits", rnd01(&[1, 2, 5, 5], 9).map(|v| 2.0 * v - 1.0));
        let mut y = Tensor::zeros(&[1, 5, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for v in y.data_mut() {
            *v = if rng.gen_bool(0.3) { 1.0 } else { 0.0 };
        }
        let w = class_weights(&y);
        let yt = fg_target(&y);
        let report = gradcheck(
            |tape, store, _cache| {
                let raw = tape.param(store, "logits");
                let pred = tape.softmax_axis(raw, 1);
                let l1 = nll(tape, pred, &y, w);
                let fgc = tape.select(pred, 1, 1);
                let ytv = tape.constant(yt.clone());
                let l2 = boundary_loss(tape, fgc, ytv, 1, 2);
                Ok(tape.add(l1, l2))
            },
            &mut store,
            1e-6,
            false,
        )
        .unwrap();
        assert!(report.max_rel_err() <= 1e-4, "{:?}", report);
    }
}
