//! Bilinear resizing with half-pixel sampling and its exact transpose for
//! the backward pass.

use ndarray::Array3;

/// The four-tap interpolation stencil for one output row/column position.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w_hi: f32,
}

fn taps(out: usize, inp: usize) -> Vec<Tap> {
    (0..out)
        .map(|o| {
            // half-pixel centers: src = (o + 0.5) * in/out - 0.5, clamped
            let src = (o as f64 + 0.5) * inp as f64 / out as f64 - 0.5;
            let src = src.clamp(0.0, (inp - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(inp - 1);
            Tap {
                lo,
                hi,
                w_hi: (src - lo as f64) as f32,
            }
        })
        .collect()
}

/// Resize `[C, H, W]` to `[C, out_h, out_w]` by bilinear interpolation.
pub fn bilinear_resize(x: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = x.dim();
    assert!(out_h >= 1 && out_w >= 1, "resize target must be >= 1");
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    for ch in 0..c {
        for (oy, ty) in ys.iter().enumerate() {
            for (ox, tx) in xs.iter().enumerate() {
                let tl = x[[ch, ty.lo, tx.lo]];
                let tr = x[[ch, ty.lo, tx.hi]];
                let bl = x[[ch, ty.hi, tx.lo]];
                let br = x[[ch, ty.hi, tx.hi]];
                let top = tl + (tr - tl) * tx.w_hi;
                let bot = bl + (br - bl) * tx.w_hi;
                out[[ch, oy, ox]] = top + (bot - top) * ty.w_hi;
            }
        }
    }
    out
}

/// Scatter an output gradient back through [`bilinear_resize`]: each output
/// pixel distributes its gradient to the four source taps with the forward
/// weights.
pub fn bilinear_resize_backward(
    dy: &Array3<f32>,
    in_h: usize,
    in_w: usize,
) -> Array3<f32> {
    let (c, out_h, out_w) = dy.dim();
    let ys = taps(out_h, in_h);
    let xs = taps(out_w, in_w);
    let mut dx = Array3::<f32>::zeros((c, in_h, in_w));
    for ch in 0..c {
        for (oy, ty) in ys.iter().enumerate() {
            for (ox, tx) in xs.iter().enumerate() {
                let g = dy[[ch, oy, ox]];
                let (wy_hi, wx_hi) = (ty.w_hi, tx.w_hi);
                dx[[ch, ty.lo, tx.lo]] += g * (1.0 - wy_hi) * (1.0 - wx_hi);
                dx[[ch, ty.lo, tx.hi]] += g * (1.0 - wy_hi) * wx_hi;
                dx[[ch, ty.hi, tx.lo]] += g * wy_hi * (1.0 - wx_hi);
                dx[[ch, ty.hi, tx.hi]] += g * wy_hi * wx_hi;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testsupport::{assert_grads_close, finite_diff};
    use approx::assert_relative_eq;
    use ndarray::Array3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_when_sizes_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = Array3::from_shape_fn((2, 4, 5), |_| rng.gen_range(-1.0f32..1.0));
        let y = bilinear_resize(&x, 4, 5);
        for (a, b) in x.iter().zip(y.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn constant_input_stays_constant() {
        let x = Array3::from_elem((1, 3, 3), 2.5f32);
        let y = bilinear_resize(&x, 7, 5);
        for v in y.iter() {
            assert_relative_eq!(*v, 2.5, epsilon = 1e-6);
        }
    }

    #[test]
    fn doubling_a_linear_ramp_stays_linear_inside() {
        // values proportional to column index; interior of the upsampled map
        // must keep a constant horizontal step
        let x = Array3::from_shape_fn((1, 2, 4), |(_, _, col)| col as f32);
        let y = bilinear_resize(&x, 2, 8);
        for row in 0..2 {
            for col in 2..6 {
                let step = y[[0, row, col + 1]] - y[[0, row, col]];
                assert_relative_eq!(step, 0.5, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn upsample_2x_known_values() {
        let x = Array3::from_shape_vec((1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4);
        // corners replicate the source corners (clamped edges)
        assert_relative_eq!(y[[0, 0, 0]], 0.0, epsilon = 1e-6);
        assert_relative_eq!(y[[0, 0, 3]], 1.0, epsilon = 1e-6);
        assert_relative_eq!(y[[0, 3, 0]], 2.0, epsilon = 1e-6);
        assert_relative_eq!(y[[0, 3, 3]], 3.0, epsilon = 1e-6);
        // center positions interpolate at quarter offsets
        assert_relative_eq!(y[[0, 1, 1]], 0.75, epsilon = 1e-6);
        assert_relative_eq!(y[[0, 2, 2]], 2.25, epsilon = 1e-6);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let x: Vec<f32> = (0..2 * 3 * 3).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let dy_w: Vec<f32> = (0..2 * 6 * 6).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let numeric = finite_diff(&x, |xv| {
            let a = Array3::from_shape_vec((2, 3, 3), xv.to_vec()).unwrap();
            bilinear_resize(&a, 6, 6)
                .iter()
                .zip(dy_w.iter())
                .map(|(y, w)| *y as f64 * *w as f64)
                .sum()
        });
        let dy = Array3::from_shape_vec((2, 6, 6), dy_w).unwrap();
        let dx = bilinear_resize_backward(&dy, 3, 3);
        let analytic: Vec<f32> = dx.iter().copied().collect();
        assert_grads_close(&analytic, &numeric, "bilinear");
    }

    #[test]
    fn backward_conserves_total_gradient() {
        // the forward op maps constants to constants, so columns of its
        // matrix sum to... rows sum to 1; total mass is preserved under the
        // transpose: sum(dx) == sum(dy)
        let dy = Array3::from_elem((1, 8, 8), 1.0f32);
        let dx = bilinear_resize_backward(&dy, 4, 4);
        let total: f32 = dx.iter().sum();
        assert_relative_eq!(total, 64.0, epsilon = 1e-4);
    }
}
