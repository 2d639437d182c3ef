//! Layer normalization over the last axis.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::{scoped, HasParams, ParamMut};

const EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub ggamma: Array1<f64>,
    pub gbeta: Array1<f64>,
}

/// Per-row statistics cached by the forward pass for backprop.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normed: Array2<f64>,
    pub inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            ggamma: Array1::zeros(dim),
            gbeta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, LayerNormCache) {
        let n = x.nrows();
        let d = x.ncols();
        let mut normed = Array2::zeros((n, d));
        let mut inv_std = Array1::zeros(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std[i] = inv;
            let mut out = normed.row_mut(i);
            for j in 0..d {
                out[j] = (row[j] - mean) * inv;
            }
        }
        let mut y = normed.clone();
        for mut row in y.axis_iter_mut(Axis(0)) {
            row.zip_mut_with(&self.gamma.view(), |v, g| *v *= g);
            row += &self.beta;
        }
        (y, LayerNormCache { normed, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        let n = dy.nrows();
        let d = dy.ncols();
        let mut dx = Array2::zeros((n, d));
        for i in 0..n {
            let dyr = dy.row(i);
            let xh = cache.normed.row(i);
            for j in 0..d {
                self.ggamma[j] += dyr[j] * xh[j];
                self.gbeta[j] += dyr[j];
            }
            // dxhat = dy * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for j in 0..d {
                let dxh = dyr[j] * self.gamma[j];
                m1 += dxh;
                m2 += dxh * xh[j];
            }
            m1 /= d as f64;
            m2 /= d as f64;
            let inv = cache.inv_std[i];
            let mut dxr = dx.row_mut(i);
            for j in 0..d {
                let dxh = dyr[j] * self.gamma[j];
                dxr[j] = inv * (dxh - m1 - xh[j] * m2);
            }
        }
        dx
    }
}

impl HasParams for LayerNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        f(ParamMut {
            name: scoped(prefix, "gamma"),
            value: self.gamma.view_mut().into_dyn(),
            grad: self.ggamma.view_mut().into_dyn(),
        });
        f(ParamMut {
            name: scoped(prefix, "beta"),
            value: self.beta.view_mut().into_dyn(),
            grad: self.gbeta.view_mut().into_dyn(),
        });
    }
}
