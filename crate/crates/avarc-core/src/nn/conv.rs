//! 3x3 convolutions (stride 1 or 2, padding 1) via im2col.

use ndarray::{Array2, Array3, ArrayView3};

use super::{init, scoped, HasParams, ParamMut};
use crate::rng::SeedRng;

/// Conv2d over CHW tensors with a fixed 3x3 kernel and padding 1.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// [c_out, c_in * 9]
    pub w: Array2<f64>,
    pub b: ndarray::Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: ndarray::Array1<f64>,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

const K: usize = 3;
const PAD: isize = 1;

impl Conv2d {
    pub fn new(rng: &mut SeedRng, c_in: usize, c_out: usize, stride: usize) -> Self {
        assert!(stride == 1 || stride == 2);
        let w = init::normal_mat(rng, c_out, c_in * K * K, init::he_std(c_in * K * K));
        Self {
            gw: Array2::zeros(w.raw_dim()),
            gb: ndarray::Array1::zeros(c_out),
            b: ndarray::Array1::zeros(c_out),
            w,
            c_in,
            c_out,
            stride,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        // k=3, pad=1: stride 1 preserves, stride 2 halves (rounding up)
        ((h + 2 - K) / self.stride + 1, (w + 2 - K) / self.stride + 1)
    }

    fn im2col(&self, x: ArrayView3<'_, f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.c_in);
        let (oh, ow) = self.out_hw(h, w);
        let mut cols = Array2::zeros((self.c_in * K * K, oh * ow));
        for ci in 0..c {
            for ky in 0..K {
                for kx in 0..K {
                    let row = (ci * K + ky) * K + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + ky as isize - PAD;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize + kx as isize - PAD;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[(row, oy * ow + ox)] = x[(ci, iy as usize, ix as usize)];
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: ArrayView3<'_, f64>) -> Array3<f64> {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let cols = self.im2col(x);
        let mut y_mat = self.w.dot(&cols); // [c_out, oh*ow]
        for (mut row, bias) in y_mat.rows_mut().into_iter().zip(self.b.iter()) {
            row += *bias;
        }
        y_mat
            .into_shape_with_order((self.c_out, oh, ow))
            .expect("conv output reshape")
    }

    /// Accumulates weight grads, returns grad w.r.t. the input.
    pub fn backward(&mut self, x: ArrayView3<'_, f64>, dy: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let dy_mat = dy
            .view()
            .into_shape_with_order((self.c_out, oh * ow))
            .expect("conv dy reshape");
        let cols = self.im2col(x);
        self.gw += &dy_mat.dot(&cols.t());
        for (gb, row) in self.gb.iter_mut().zip(dy_mat.rows()) {
            *gb += row.sum();
        }

        // col2im of w^T . dy
        let dcols = self.w.t().dot(&dy_mat); // [c_in*9, oh*ow]
        let mut dx = Array3::zeros((c, h, w));
        for ci in 0..c {
            for ky in 0..K {
                for kx in 0..K {
                    let row = (ci * K + ky) * K + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + ky as isize - PAD;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize + kx as isize - PAD;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[(ci, iy as usize, ix as usize)] += dcols[(row, oy * ow + ox)];
                        }
                    }
                }
            }
        }
        dx
    }
}

impl HasParams for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        f(ParamMut {
            name: scoped(prefix, "w"),
            value: self.w.view_mut().into_dyn(),
            grad: self.gw.view_mut().into_dyn(),
        });
        f(ParamMut {
            name: scoped(prefix, "b"),
            value: self.b.view_mut().into_dyn(),
            grad: self.gb.view_mut().into_dyn(),
        });
    }
}
