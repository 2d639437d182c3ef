//! Dense layer with explicit backward.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::{init, scoped, HasParams, ParamMut};
use crate::rng::SeedRng;

/// y = x · w + b with x: [n, d_in], w: [d_in, d_out].
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
}

impl Linear {
    pub fn new(rng: &mut SeedRng, d_in: usize, d_out: usize) -> Self {
        let w = init::normal_mat(rng, d_in, d_out, init::he_std(d_in));
        Self {
            gw: Array2::zeros(w.raw_dim()),
            gb: Array1::zeros(d_out),
            b: Array1::zeros(d_out),
            w,
        }
    }

    /// All-zero weights; used for output heads so an untrained model emits a
    /// uniform distribution.
    pub fn zeroed(d_in: usize, d_out: usize) -> Self {
        Self {
            w: Array2::zeros((d_in, d_out)),
            b: Array1::zeros(d_out),
            gw: Array2::zeros((d_in, d_out)),
            gb: Array1::zeros(d_out),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates parameter grads, returns grad w.r.t. x.
    pub fn backward(&mut self, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        self.gw += &x.t().dot(&dy);
        self.gb += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl HasParams for Linear {
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
