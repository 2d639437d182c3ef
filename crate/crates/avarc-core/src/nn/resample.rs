//! Bilinear and nearest-neighbor resizing of [h, w, c] grids, with the
//! adjoint (scatter) operation used for backprop. Sample positions follow the
//! half-pixel convention: src = (dst + 0.5) * (in/out) - 0.5, clamped.

use ndarray::{Array3, ArrayView3};

/// Weights of one output cell's 2x2 source neighborhood.
#[inline]
fn axis_taps(dst: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    if n_in == n_out {
        return (dst, dst, 1.0);
    }
    let pos = (dst as f64 + 0.5) * (n_in as f64 / n_out as f64) - 0.5;
    let pos = pos.clamp(0.0, (n_in - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n_in - 1);
    (lo, hi, pos - lo as f64)
}

pub fn bilinear_resize(x: ArrayView3<'_, f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let mut out = Array3::zeros((oh, ow, c));
    for oy in 0..oh {
        let (y0, y1, fy) = axis_taps(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = axis_taps(ox, w, ow);
            for ch in 0..c {
                let v = (1.0 - fy) * ((1.0 - fx) * x[(y0, x0, ch)] + fx * x[(y0, x1, ch)])
                    + fy * ((1.0 - fx) * x[(y1, x0, ch)] + fx * x[(y1, x1, ch)]);
                out[(oy, ox, ch)] = v;
            }
        }
    }
    out
}

/// Adjoint of `bilinear_resize`: scatters `dout` (shape [oh, ow, c]) back to
/// an input-shaped gradient [h, w, c].
pub fn bilinear_resize_adjoint(dout: ArrayView3<'_, f64>, h: usize, w: usize) -> Array3<f64> {
    let (oh, ow, c) = dout.dim();
    let mut dx = Array3::zeros((h, w, c));
    for oy in 0..oh {
        let (y0, y1, fy) = axis_taps(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = axis_taps(ox, w, ow);
            for ch in 0..c {
                let d = dout[(oy, ox, ch)];
                dx[(y0, x0, ch)] += (1.0 - fy) * (1.0 - fx) * d;
                dx[(y0, x1, ch)] += (1.0 - fy) * fx * d;
                dx[(y1, x0, ch)] += fy * (1.0 - fx) * d;
                dx[(y1, x1, ch)] += fy * fx * d;
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling of a CHW tensor (decoder upsampling stage).
pub fn nearest_upsample2_chw(x: ArrayView3<'_, f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, h * 2, w * 2));
    for ch in 0..c {
        for y in 0..h * 2 {
            for xx in 0..w * 2 {
                out[(ch, y, xx)] = x[(ch, y / 2, xx / 2)];
            }
        }
    }
    out
}

/// Adjoint of `nearest_upsample2_chw`.
pub fn nearest_upsample2_chw_adjoint(dout: ArrayView3<'_, f64>) -> Array3<f64> {
    let (c, h2, w2) = dout.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                dx[(ch, y / 2, xx / 2)] += dout[(ch, y, xx)];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array3;

    #[test]
    fn constant_map_stays_constant() {
        let x = Array3::from_elem((3, 5, 2), 4.25);
        for &(oh, ow) in &[(1usize, 1usize), (3, 5), (9, 11), (2, 2)] {
            let y = bilinear_resize(x.view(), oh, ow);
            for v in y.iter() {
                assert_relative_eq!(*v, 4.25, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn identity_when_same_size() {
        let x = Array3::from_shape_fn((4, 6, 3), |(a, b, c)| (a * 100 + b * 10 + c) as f64);
        let y = bilinear_resize(x.view(), 4, 6);
        assert_eq!(x, y);
    }

    #[test]
    fn adjoint_matches_transpose() {
        // <A x, y> == <x, A^T y> for random x, y
        use crate::rng::rng_from_seed;
        use rand::Rng;
        let mut rng = rng_from_seed(3);
        let x = Array3::from_shape_fn((5, 7, 2), |_| rng.random::<f64>() - 0.5);
        let y = Array3::from_shape_fn((3, 4, 2), |_| rng.random::<f64>() - 0.5);
        let ax = bilinear_resize(x.view(), 3, 4);
        let aty = bilinear_resize_adjoint(y.view(), 5, 7);
        let lhs: f64 = (&ax * &y).sum();
        let rhs: f64 = (&x * &aty).sum();
        assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
    }
}
