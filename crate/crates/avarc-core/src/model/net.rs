//! Transformer internals for the next-scale predictor: embedding tables,
//! pre-LN blocks with block-causal attention, and the paired forward/backward
//! passes used by training. Inference uses a cache-free forward.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::attention::AttentionCache;
use crate::nn::norm::LayerNormCache;
use crate::nn::resample::{bilinear_resize, bilinear_resize_adjoint};
use crate::nn::{
    gelu, gelu_grad, scoped, BlockCausalAttention, HasParams, LayerNorm, Linear, ParamMut,
};
use crate::rng::{derive_rng, SeedRng};
use crate::tokenizer::{MultiScaleTokenMap, ScaleSchedule};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub vocab: usize,
    pub n_classes: usize,
    pub schedule: ScaleSchedule,
    pub seed: u64,
}

impl ModelConfig {
    pub fn desk_default(n_classes: usize) -> Self {
        Self {
            dim: 64,
            blocks: 2,
            heads: 4,
            vocab: 512,
            n_classes,
            schedule: ScaleSchedule::desk_default(),
            seed: 0,
        }
    }
}

/// Embedding rows with gradient accumulator.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub w: Array2<f64>,
    pub gw: Array2<f64>,
}

impl Embedding {
    pub fn new(rng: &mut SeedRng, rows: usize, dim: usize) -> Self {
        let w = crate::nn::init::normal_mat(rng, rows, dim, 0.02);
        Self {
            gw: Array2::zeros(w.raw_dim()),
            w,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: BlockCausalAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    ln1_out: Array2<f64>,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ln2_out: Array2<f64>,
    fc1_out: Array2<f64>,
    gelu_out: Array2<f64>,
}

const MLP_RATIO: usize = 4;

impl TransformerBlock {
    pub fn new(rng: &mut SeedRng, dim: usize, heads: usize) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: BlockCausalAttention::new(rng, dim, heads),
            ln2: LayerNorm::new(dim),
            fc1: Linear::new(rng, dim, dim * MLP_RATIO),
            fc2: Linear::new(rng, dim * MLP_RATIO, dim),
        }
    }

    pub fn forward_infer(&self, x: &Array2<f64>, limits: &[usize]) -> Array2<f64> {
        let (a, _) = self.ln1.forward(x.view());
        let attn_out = self.attn.forward_infer(a.view(), limits);
        let x_mid = x + &attn_out;
        let (m, _) = self.ln2.forward(x_mid.view());
        let h = self.fc1.forward(m.view()).mapv(gelu);
        let mlp_out = self.fc2.forward(h.view());
        x_mid + mlp_out
    }

    pub fn forward_train(&self, x: Array2<f64>, limits: &[usize]) -> (Array2<f64>, BlockCache) {
        let (ln1_out, ln1) = self.ln1.forward(x.view());
        let (attn_out, attn) = self.attn.forward(ln1_out.view(), limits);
        let x_mid = &x + &attn_out;
        let (ln2_out, ln2) = self.ln2.forward(x_mid.view());
        let fc1_out = self.fc1.forward(ln2_out.view());
        let gelu_out = fc1_out.mapv(gelu);
        let mlp_out = self.fc2.forward(gelu_out.view());
        let y = &x_mid + &mlp_out;
        (
            y,
            BlockCache {
                ln1,
                ln1_out,
                attn,
                ln2,
                ln2_out,
                fc1_out,
                gelu_out,
            },
        )
    }

    pub fn backward(
        &mut self,
        cache: &BlockCache,
        dy: ArrayView2<'_, f64>,
        limits: &[usize],
    ) -> Array2<f64> {
        let dg = self.fc2.backward(cache.gelu_out.view(), dy);
        let dh1 = &dg * &cache.fc1_out.mapv(gelu_grad);
        let dln2_out = self.fc1.backward(cache.ln2_out.view(), dh1.view());
        let dx_mid = &dy.to_owned() + &self.ln2.backward(&cache.ln2, dln2_out.view());
        let dln1_out = self
            .attn
            .backward(cache.ln1_out.view(), &cache.attn, dx_mid.view(), limits);
        &dx_mid + &self.ln1.backward(&cache.ln1, dln1_out.view())
    }
}

impl HasParams for TransformerBlock {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.ln1.visit_params(&scoped(prefix, "ln1"), f);
        self.attn.visit_params(&scoped(prefix, "attn"), f);
        self.ln2.visit_params(&scoped(prefix, "ln2"), f);
        self.fc1.visit_params(&scoped(prefix, "fc1"), f);
        self.fc2.visit_params(&scoped(prefix, "fc2"), f);
    }
}

/// Flattened coarse-to-fine position bookkeeping for a schedule prefix.
pub(crate) struct SequenceLayout {
    /// (scale, row, col) per position.
    pub cells: Vec<(usize, usize, usize)>,
    /// Attention limit per position: tokens through that position's scale.
    pub limits: Vec<usize>,
    /// Row range of each scale in the flattened sequence.
    pub scale_ranges: Vec<(usize, usize)>,
}

impl SequenceLayout {
    pub fn new(schedule: &ScaleSchedule, upto_scale: usize) -> Self {
        let mut cells = Vec::new();
        let mut limits = Vec::new();
        let mut scale_ranges = Vec::new();
        for k in 0..upto_scale {
            let (h, w) = schedule.side(k);
            let start = cells.len();
            let limit = schedule.prefix_tokens(k + 1);
            for i in 0..h {
                for j in 0..w {
                    cells.push((k, i, j));
                    limits.push(limit);
                }
            }
            scale_ranges.push((start, cells.len()));
        }
        Self {
            cells,
            limits,
            scale_ranges,
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }
}

/// Per-scale inputs built from the cumulative embedding reconstruction; the
/// backward pass replays the resize chain in reverse.
pub(crate) struct InputCache {
    pub x0: Array2<f64>,
    pub label_row: usize,
}

pub(crate) struct TrainCache {
    pub input: InputCache,
    pub blocks: Vec<BlockCache>,
    pub final_ln: LayerNormCache,
    pub normed: Array2<f64>,
    /// Row-wise log-softmax of the head output.
    pub log_probs: Array2<f64>,
}

/// The conditional next-scale predictor.
#[derive(Debug)]
pub struct NextScaleModel {
    pub token_emb: Embedding,
    /// Rows 0..n_classes are class labels; the final row is the NULL label.
    pub label_emb: Embedding,
    pub pos_emb: Embedding,
    pub scale_emb: Embedding,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
    pub head: Linear,
    pub config: ModelConfig,
    pub null_trained: bool,
    evals: std::sync::atomic::AtomicU64,
}

impl Clone for NextScaleModel {
    fn clone(&self) -> Self {
        Self {
            token_emb: self.token_emb.clone(),
            label_emb: self.label_emb.clone(),
            pos_emb: self.pos_emb.clone(),
            scale_emb: self.scale_emb.clone(),
            blocks: self.blocks.clone(),
            final_norm: self.final_norm.clone(),
            head: self.head.clone(),
            config: self.config.clone(),
            null_trained: self.null_trained,
            evals: std::sync::atomic::AtomicU64::new(0),
        }
    }
}

impl HasParams for NextScaleModel {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        f(ParamMut {
            name: scoped(prefix, "token_emb"),
            value: self.token_emb.w.view_mut().into_dyn(),
            grad: self.token_emb.gw.view_mut().into_dyn(),
        });
        f(ParamMut {
            name: scoped(prefix, "label_emb"),
            value: self.label_emb.w.view_mut().into_dyn(),
            grad: self.label_emb.gw.view_mut().into_dyn(),
        });
        f(ParamMut {
            name: scoped(prefix, "pos_emb"),
            value: self.pos_emb.w.view_mut().into_dyn(),
            grad: self.pos_emb.gw.view_mut().into_dyn(),
        });
        f(ParamMut {
            name: scoped(prefix, "scale_emb"),
            value: self.scale_emb.w.view_mut().into_dyn(),
            grad: self.scale_emb.gw.view_mut().into_dyn(),
        });
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&scoped(prefix, &format!("blocks.{i}")), f);
        }
        self.final_norm.visit_params(&scoped(prefix, "final_norm"), f);
        self.head.visit_params(&scoped(prefix, "head"), f);
    }
}

impl NextScaleModel {
    /// Fresh model. The output head starts at zero so an untrained model
    /// assigns the uniform distribution to every token.
    pub fn init(config: ModelConfig) -> Self {
        let mut rng = derive_rng(config.seed, "nextscale-init");
        let dim = config.dim;
        let total = config.schedule.total_tokens();
        let blocks = (0..config.blocks)
            .map(|_| TransformerBlock::new(&mut rng, dim, config.heads))
            .collect();
        Self {
            token_emb: Embedding::new(&mut rng, config.vocab, dim),
            label_emb: Embedding::new(&mut rng, config.n_classes + 1, dim),
            pos_emb: Embedding::new(&mut rng, total, dim),
            scale_emb: Embedding::new(&mut rng, config.schedule.num_scales(), dim),
            blocks,
            final_norm: LayerNorm::new(dim),
            head: Linear::zeroed(dim, config.vocab),
            config,
            null_trained: false,
            evals: std::sync::atomic::AtomicU64::new(0),
        }
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.config.schedule
    }

    pub fn num_scales(&self) -> usize {
        self.config.schedule.num_scales()
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    /// Number of forward evaluations since construction or the last reset.
    pub fn forward_evals(&self) -> u64 {
        self.evals.load(std::sync::atomic::Ordering::Relaxed)
    }

    pub fn reset_forward_evals(&self) {
        self.evals.store(0, std::sync::atomic::Ordering::Relaxed);
    }

    /// Mark the NULL row as usable (set by MLE training with label dropout).
    pub fn set_null_trained(&mut self, trained: bool) {
        self.null_trained = trained;
    }

    pub(crate) fn label_row(&self, y: super::ClassLabel) -> Result<usize> {
        match y {
            super::ClassLabel::Class(i) => {
                if i >= self.config.n_classes {
                    Err(Error::LabelOutOfRange {
                        id: i,
                        n_classes: self.config.n_classes,
                    })
                } else {
                    Ok(i)
                }
            }
            super::ClassLabel::Null => {
                if self.null_trained {
                    Ok(self.config.n_classes)
                } else {
                    Err(Error::Capability(
                        "unconditional evaluation requires a model trained with label dropout"
                            .into(),
                    ))
                }
            }
        }
    }

    fn check_tokens(&self, tokens: &MultiScaleTokenMap, upto_scale: usize) -> Result<()> {
        if upto_scale == 0 || upto_scale > self.num_scales() {
            return Err(Error::Parameter(format!(
                "upto_scale must be in [1, {}], got {upto_scale}",
                self.num_scales()
            )));
        }
        if tokens.schedule != self.config.schedule {
            return Err(Error::shape(
                "token schedule",
                format!("{:?}", self.config.schedule.sides()),
                format!("{:?}", tokens.schedule.sides()),
            ));
        }
        tokens.validate(self.config.vocab)
    }

    /// Build the input embedding matrix for a schedule prefix. Scale k > 1
    /// rows carry the downsampled cumulative token-embedding reconstruction
    /// of scales < k; every row carries label, position and scale embeddings.
    fn build_inputs(
        &self,
        tokens: &MultiScaleTokenMap,
        label_row: usize,
        layout: &SequenceLayout,
        upto_scale: usize,
    ) -> InputCache {
        let dim = self.config.dim;
        let (lh, lw) = self.config.schedule.latent_hw();
        let mut x0 = Array2::<f64>::zeros((layout.len(), dim));
        let mut acc = Array3::<f64>::zeros((lh, lw, dim));
        let label_vec = self.label_emb.w.row(label_row);

        for k in 0..upto_scale {
            let (hk, wk) = self.config.schedule.side(k);
            let (start, _end) = layout.scale_ranges[k];
            let scale_vec = self.scale_emb.w.row(k);
            let interp = if k > 0 {
                Some(bilinear_resize(acc.view(), hk, wk))
            } else {
                None
            };
            for i in 0..hk {
                for j in 0..wk {
                    let row = start + i * wk + j;
                    let mut out = x0.row_mut(row);
                    out.assign(&self.pos_emb.w.row(row));
                    out += &label_vec;
                    out += &scale_vec;
                    if let Some(interp) = &interp {
                        let cell = interp.index_axis(Axis(0), i);
                        out += &cell.row(j);
                    }
                }
            }
            // fold this scale's token embeddings into the running canvas
            if k + 1 < upto_scale {
                let mut emb_map = Array3::<f64>::zeros((hk, wk, dim));
                for i in 0..hk {
                    for j in 0..wk {
                        let id = tokens.maps[k][(i, j)] as usize;
                        emb_map
                            .index_axis_mut(Axis(0), i)
                            .row_mut(j)
                            .assign(&self.token_emb.w.row(id));
                    }
                }
                acc += &bilinear_resize(emb_map.view(), lh, lw);
            }
        }
        InputCache { x0, label_row }
    }

    /// Reverse of `build_inputs`: scatters `dx0` into the embedding grads.
    fn backward_inputs(
        &mut self,
        tokens: &MultiScaleTokenMap,
        cache: &InputCache,
        layout: &SequenceLayout,
        upto_scale: usize,
        dx0: &Array2<f64>,
    ) {
        let dim = self.config.dim;
        let (lh, lw) = self.config.schedule.latent_hw();
        // shared additive embeddings
        for row in 0..layout.len() {
            let d = dx0.row(row);
            let (k, _, _) = layout.cells[row];
            let mut gl = self.label_emb.gw.row_mut(cache.label_row);
            for (g, v) in gl.iter_mut().zip(d.iter()) {
                *g += v;
            }
            let mut gp = self.pos_emb.gw.row_mut(row);
            for (g, v) in gp.iter_mut().zip(d.iter()) {
                *g += v;
            }
            let mut gs = self.scale_emb.gw.row_mut(k);
            for (g, v) in gs.iter_mut().zip(d.iter()) {
                *g += v;
            }
        }
        // token-embedding path through the cumulative canvas, in reverse
        let mut dacc = Array3::<f64>::zeros((lh, lw, dim));
        for k in (1..upto_scale).rev() {
            let (hk, wk) = self.config.schedule.side(k);
            let (start, _) = layout.scale_ranges[k];
            let mut dinterp = Array3::<f64>::zeros((hk, wk, dim));
            for i in 0..hk {
                for j in 0..wk {
                    let row = start + i * wk + j;
                    dinterp
                        .index_axis_mut(Axis(0), i)
                        .row_mut(j)
                        .assign(&dx0.row(row));
                }
            }
            dacc += &bilinear_resize_adjoint(dinterp.view(), lh, lw);
            // canvas contribution of scale k-1's embeddings
            let (hp, wp) = self.config.schedule.side(k - 1);
            let demb = bilinear_resize_adjoint(dacc.view(), hp, wp);
            for i in 0..hp {
                for j in 0..wp {
                    let id = tokens.maps[k - 1][(i, j)] as usize;
                    let cell = demb.index_axis(Axis(0), i);
                    let cell = cell.row(j);
                    let mut g = self.token_emb.gw.row_mut(id);
                    for (gv, dv) in g.iter_mut().zip(cell.iter()) {
                        *gv += dv;
                    }
                }
            }
        }
    }

    fn bump_evals(&self) {
        self.evals
            .fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    }

    /// Cache-free forward returning row-wise log-softmax over the vocabulary,
    /// [prefix_len, vocab]. One "forward pass" for instrumentation purposes.
    pub(crate) fn forward_log_probs(
        &self,
        tokens: &MultiScaleTokenMap,
        y: super::ClassLabel,
        upto_scale: usize,
    ) -> Result<Array2<f64>> {
        self.check_tokens(tokens, upto_scale)?;
        let label_row = self.label_row(y)?;
        self.bump_evals();
        let layout = SequenceLayout::new(&self.config.schedule, upto_scale);
        let input = self.build_inputs(tokens, label_row, &layout, upto_scale);
        let mut x = input.x0;
        for block in &self.blocks {
            x = block.forward_infer(&x, &layout.limits);
        }
        let (normed, _) = self.final_norm.forward(x.view());
        let logits = self.head.forward(normed.view());
        Ok(log_softmax_rows(&logits))
    }

    /// Forward keeping every activation needed for backprop.
    pub(crate) fn forward_train(
        &self,
        tokens: &MultiScaleTokenMap,
        y: super::ClassLabel,
        upto_scale: usize,
    ) -> Result<TrainCache> {
        self.check_tokens(tokens, upto_scale)?;
        let label_row = self.label_row(y)?;
        self.bump_evals();
        let layout = SequenceLayout::new(&self.config.schedule, upto_scale);
        let input = self.build_inputs(tokens, label_row, &layout, upto_scale);
        let mut x = input.x0.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y_out, cache) = block.forward_train(x, &layout.limits);
            blocks.push(cache);
            x = y_out;
        }
        let (normed, final_ln) = self.final_norm.forward(x.view());
        let logits = self.head.forward(normed.view());
        let log_probs = log_softmax_rows(&logits);
        Ok(TrainCache {
            input,
            blocks,
            final_ln,
            normed,
            log_probs,
        })
    }

    /// Backprop from a gradient on the log-softmax target gathers.
    ///
    /// `coeffs[pos]` scales the gradient of `log p[pos, target(pos)]`; the
    /// implied logit gradient is `coeff * (onehot - softmax)` per row.
    pub(crate) fn backward_targets(
        &mut self,
        tokens: &MultiScaleTokenMap,
        cache: &TrainCache,
        upto_scale: usize,
        coeffs: &[f64],
    ) {
        let layout = SequenceLayout::new(&self.config.schedule, upto_scale);
        let n = layout.len();
        debug_assert_eq!(coeffs.len(), n);
        let vocab = self.config.vocab;
        let mut dlogits = Array2::<f64>::zeros((n, vocab));
        for row in 0..n {
            let (k, i, j) = layout.cells[row];
            let target = tokens.maps[k][(i, j)] as usize;
            let c = coeffs[row];
            if c == 0.0 {
                continue;
            }
            let lp = cache.log_probs.row(row);
            let mut dl = dlogits.row_mut(row);
            for v in 0..vocab {
                let p = lp[v].exp();
                dl[v] = c * (((v == target) as u64 as f64) - p);
            }
        }
        self.backward_from_dlogits(tokens, cache, upto_scale, &layout, dlogits);
    }

    fn backward_from_dlogits(
        &mut self,
        tokens: &MultiScaleTokenMap,
        cache: &TrainCache,
        upto_scale: usize,
        layout: &SequenceLayout,
        dlogits: Array2<f64>,
    ) {
        let dnormed = self.head.backward(cache.normed.view(), dlogits.view());
        let mut dx = self.final_norm.backward(&cache.final_ln, dnormed.view());
        for (block, bcache) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            dx = block.backward(bcache, dx.view(), &layout.limits);
        }
        self.backward_inputs(tokens, &cache.input, layout, upto_scale, &dx);
    }
}

pub(crate) fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl BlockCausalAttention {
    /// Forward without retaining softmax weights; used on inference paths.
    pub fn forward_infer(&self, x: ArrayView2<'_, f64>, limits: &[usize]) -> Array2<f64> {
        let n = x.nrows();
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv_out = self.qkv.forward(x);
        let mut concat = Array2::zeros((n, self.dim));
        for h in 0..self.heads {
            let q = qkv_out.slice(ndarray::s![.., h * dh..(h + 1) * dh]);
            let k = qkv_out.slice(ndarray::s![.., self.dim + h * dh..self.dim + (h + 1) * dh]);
            let v = qkv_out.slice(ndarray::s![
                ..,
                2 * self.dim + h * dh..2 * self.dim + (h + 1) * dh
            ]);
            let mut scores = Vec::new();
            for i in 0..n {
                let lim = limits[i].min(n);
                let qi = q.row(i);
                scores.clear();
                scores.reserve(lim);
                let mut row_max = f64::NEG_INFINITY;
                for j in 0..lim {
                    let s = qi.dot(&k.row(j)) * scale;
                    row_max = row_max.max(s);
                    scores.push(s);
                }
                let mut denom = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - row_max).exp();
                    denom += *s;
                }
                let mut ctx = vec![0.0; dh];
                for (j, s) in scores.iter().enumerate() {
                    let p = s / denom;
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
        self.out.forward(concat.view())
    }
}
