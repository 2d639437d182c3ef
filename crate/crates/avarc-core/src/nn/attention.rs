//! Multi-head attention with a block-causal mask expressed as per-row key
//! limits: row i may attend to key positions `0..limits[i]`. Sequences are
//! ordered coarse-to-fine, so "everything in my scale and all earlier scales"
//! is a contiguous prefix.

use ndarray::{s, Array2, Array3, ArrayView2};

use super::{scoped, HasParams, Linear, ParamMut};
use crate::rng::SeedRng;

#[derive(Debug, Clone)]
pub struct BlockCausalAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Forward activations needed by the backward pass.
pub struct AttentionCache {
    qkv_out: Array2<f64>,
    /// Softmax weights, one [n, n] matrix per head (rows past each limit are 0).
    probs: Array3<f64>,
    concat: Array2<f64>,
}

impl BlockCausalAttention {
    pub fn new(rng: &mut SeedRng, dim: usize, heads: usize) -> Self {
        assert!(dim % heads == 0, "dim must be divisible by heads");
        Self {
            qkv: Linear::new(rng, dim, 3 * dim),
            out: Linear::new(rng, dim, dim),
            heads,
            dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(
        &self,
        x: ArrayView2<'_, f64>,
        limits: &[usize],
    ) -> (Array2<f64>, AttentionCache) {
        let n = x.nrows();
        debug_assert_eq!(limits.len(), n);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let qkv_out = self.qkv.forward(x);
        let mut probs = Array3::zeros((self.heads, n, n));
        let mut concat = Array2::zeros((n, self.dim));

        for h in 0..self.heads {
            let q = qkv_out.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv_out.slice(s![.., self.dim + h * dh..self.dim + (h + 1) * dh]);
            let v = qkv_out.slice(s![.., 2 * self.dim + h * dh..2 * self.dim + (h + 1) * dh]);

            for i in 0..n {
                let lim = limits[i].min(n);
                debug_assert!(lim >= 1, "every row must see at least one key");
                let qi = q.row(i);
                // scores over the visible prefix
                let mut row_max = f64::NEG_INFINITY;
                let mut scores = vec![0.0; lim];
                for (j, sc) in scores.iter_mut().enumerate() {
                    let dot = qi.dot(&k.row(j));
                    *sc = dot * scale;
                    row_max = row_max.max(*sc);
                }
                let mut denom = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - row_max).exp();
                    denom += *sc;
                }
                let mut ctx = vec![0.0; dh];
                for (j, sc) in scores.iter().enumerate() {
                    let p = sc / denom;
                    probs[(h, i, j)] = p;
                    let vj = v.row(j);
                    for (c, vv) in ctx.iter_mut().zip(vj.iter()) {
                        *c += p * vv;
                    }
                }
                for (c, val) in ctx.iter().enumerate() {
                    concat[(i, h * dh + c)] = *val;
                }
            }
        }

        let y = self.out.forward(concat.view());
        (
            y,
            AttentionCache {
                qkv_out,
                probs,
                concat,
            },
        )
    }

    pub fn backward(
        &mut self,
        x: ArrayView2<'_, f64>,
        cache: &AttentionCache,
        dy: ArrayView2<'_, f64>,
        limits: &[usize],
    ) -> Array2<f64> {
        let n = x.nrows();
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let dconcat = self.out.backward(cache.concat.view(), dy);
        let mut dqkv = Array2::zeros((n, 3 * self.dim));

        for h in 0..self.heads {
            let q = cache.qkv_out.slice(s![.., h * dh..(h + 1) * dh]);
            let k = cache
                .qkv_out
                .slice(s![.., self.dim + h * dh..self.dim + (h + 1) * dh]);
            let v = cache
                .qkv_out
                .slice(s![.., 2 * self.dim + h * dh..2 * self.dim + (h + 1) * dh]);

            for i in 0..n {
                let lim = limits[i].min(n);
                let dctx = dconcat.slice(s![i, h * dh..(h + 1) * dh]);

                // dV and dP
                let mut dp = vec![0.0; lim];
                for (j, dpj) in dp.iter_mut().enumerate() {
                    let p = cache.probs[(h, i, j)];
                    let vj = v.row(j);
                    let mut acc = 0.0;
                    for (dc, vv) in dctx.iter().zip(vj.iter()) {
                        acc += dc * vv;
                    }
                    *dpj = acc;
                    // dV_j += p * dctx
                    for (c, dc) in dctx.iter().enumerate() {
                        dqkv[(j, 2 * self.dim + h * dh + c)] += p * dc;
                    }
                }

                // softmax backward: ds_j = p_j * (dp_j - sum_m dp_m p_m)
                let mut dot = 0.0;
                for (j, dpj) in dp.iter().enumerate() {
                    dot += dpj * cache.probs[(h, i, j)];
                }
                for (j, dpj) in dp.iter().enumerate() {
                    let p = cache.probs[(h, i, j)];
                    let ds = p * (dpj - dot) * scale;
                    // s_ij = scale * q_i . k_j
                    let kj = k.row(j);
                    let qi = q.row(i);
                    for c in 0..dh {
                        dqkv[(i, h * dh + c)] += ds * kj[c];
                        dqkv[(j, self.dim + h * dh + c)] += ds * qi[c];
                    }
                }
            }
        }

        self.qkv.backward(x, dqkv.view())
    }
}

impl HasParams for BlockCausalAttention {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.qkv.visit_params(&scoped(prefix, "qkv"), f);
        self.out.visit_params(&scoped(prefix, "out"), f);
    }
}
