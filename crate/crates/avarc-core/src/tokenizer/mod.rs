//! Residual multi-scale vector quantization of images.
//!
//! An image is encoded to a latent feature map, then quantized coarse-to-fine:
//! each scale snaps a downsampled view of the remaining residual to its
//! nearest codebook vector and subtracts the upsampled result. Decoding sums
//! the per-scale lookups and runs the decoder.

mod train;

pub use train::{train_tokenizer, TokenizerTrainConfig, TokenizerTrainReport};

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::resample::{bilinear_resize, nearest_upsample2_chw};
use crate::nn::{gelu, scoped, Conv2d, HasParams, ParamMut};
use crate::rng::{derive_rng, SeedRng};

/// An image as a [channels, height, width] array with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (_, h, w) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::shape("image", "H, W >= 1", format!("{h}x{w}")));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("image values must lie in [0, 1]".into()));
        }
        Ok(Self { pixels })
    }

    /// Clamps out-of-range values instead of rejecting them.
    pub fn from_clamped(mut pixels: Array3<f64>) -> Self {
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self { pixels }
    }

    pub fn pixels(&self) -> ArrayView3<'_, f64> {
        self.pixels.view()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.pixels.dim()
    }
}

/// Latent feature map, [h, w, feat_dim].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Array3<f64>,
}

impl FeatureMap {
    pub fn hw(&self) -> (usize, usize) {
        let (h, w, _) = self.values.dim();
        (h, w)
    }

    pub fn feat_dim(&self) -> usize {
        self.values.dim().2
    }
}

/// Codebook of quantization vectors, [vocab, feat_dim].
#[derive(Debug, Clone)]
pub struct Codebook {
    pub vectors: Array2<f64>,
    pub grad: Array2<f64>,
}

impl Codebook {
    pub fn new(vectors: Array2<f64>) -> Self {
        Self {
            grad: Array2::zeros(vectors.raw_dim()),
            vectors,
        }
    }

    pub fn vocab(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn feat_dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Index of the nearest vector (L2); ties resolve to the smallest index.
    pub fn nearest(&self, cell: &[f64]) -> u32 {
        let mut best = 0u32;
        let mut best_d = f64::INFINITY;
        for (v, row) in self.vectors.rows().into_iter().enumerate() {
            let mut d = 0.0;
            for (a, b) in row.iter().zip(cell.iter()) {
                let diff = a - b;
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = v as u32;
            }
        }
        best
    }
}

/// The ordered (h_k, w_k) grid sizes of the scale pyramid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    sides: Vec<(usize, usize)>,
}

impl ScaleSchedule {
    pub fn new(sides: Vec<(usize, usize)>) -> Result<Self> {
        if sides.is_empty() {
            return Err(Error::Parameter("schedule must have at least one scale".into()));
        }
        for win in sides.windows(2) {
            let (a, b) = (win[0], win[1]);
            if b.0 < a.0 || b.1 < a.1 {
                return Err(Error::Parameter(format!(
                    "schedule sides must be non-decreasing, got {a:?} then {b:?}"
                )));
            }
        }
        if sides.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::Parameter("schedule sides must be positive".into()));
        }
        Ok(Self { sides })
    }

    /// Default pyramid for a 7x7 latent grid (28x28 inputs).
    pub fn desk_default() -> Self {
        Self::new(vec![(1, 1), (2, 2), (3, 3), (5, 5), (7, 7)]).unwrap()
    }

    /// The 10-scale pyramid for a 16x16 latent grid; totals 680 tokens.
    pub fn reference() -> Self {
        let sides = [1usize, 2, 3, 4, 5, 6, 8, 10, 13, 16];
        Self::new(sides.iter().map(|&s| (s, s)).collect()).unwrap()
    }

    pub fn num_scales(&self) -> usize {
        self.sides.len()
    }

    pub fn side(&self, k: usize) -> (usize, usize) {
        self.sides[k]
    }

    pub fn sides(&self) -> &[(usize, usize)] {
        &self.sides
    }

    /// Final (latent) grid size.
    pub fn latent_hw(&self) -> (usize, usize) {
        *self.sides.last().unwrap()
    }

    pub fn total_tokens(&self) -> usize {
        self.sides.iter().map(|&(h, w)| h * w).sum()
    }

    /// Tokens in scales 1..=k (k is 1-based; k = 0 gives 0).
    pub fn prefix_tokens(&self, k: usize) -> usize {
        self.sides.iter().take(k).map(|&(h, w)| h * w).sum()
    }
}

/// Token grids for every scale of a schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleTokenMap {
    pub maps: Vec<Array2<u32>>,
    pub schedule: ScaleSchedule,
}

impl MultiScaleTokenMap {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.maps.len() != self.schedule.num_scales() {
            return Err(Error::shape(
                "token map count",
                self.schedule.num_scales(),
                self.maps.len(),
            ));
        }
        for (k, map) in self.maps.iter().enumerate() {
            let (h, w) = self.schedule.side(k);
            if map.dim() != (h, w) {
                return Err(Error::shape(
                    format!("token map at scale {k}"),
                    format!("{h}x{w}"),
                    format!("{}x{}", map.dim().0, map.dim().1),
                ));
            }
            if let Some(&id) = map.iter().find(|&&id| id as usize >= vocab) {
                return Err(Error::InvalidToken { id, vocab });
            }
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> usize {
        self.schedule.total_tokens()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerMeta {
    pub img_channels: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub feat_dim: usize,
    pub vocab: usize,
    pub width1: usize,
    pub width2: usize,
}

/// Two stride-2 stages: H x W -> H/4 x W/4.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    pub c1: Conv2d,
    pub c2: Conv2d,
    pub c3: Conv2d,
}

pub(crate) struct EncoderCache {
    pub a1: Array3<f64>,
    pub h1: Array3<f64>,
    pub a2: Array3<f64>,
    pub h2: Array3<f64>,
}

impl ConvEncoder {
    pub fn new(rng: &mut SeedRng, meta: &TokenizerMeta) -> Self {
        Self {
            c1: Conv2d::new(rng, meta.img_channels, meta.width1, 2),
            c2: Conv2d::new(rng, meta.width1, meta.width2, 2),
            c3: Conv2d::new(rng, meta.width2, meta.feat_dim, 1),
        }
    }

    /// Returns the latent as [h, w, feat].
    pub fn forward(&self, x: ArrayView3<'_, f64>) -> Array3<f64> {
        let (f, _) = self.forward_cached(x);
        f
    }

    pub(crate) fn forward_cached(&self, x: ArrayView3<'_, f64>) -> (Array3<f64>, EncoderCache) {
        let a1 = self.c1.forward(x);
        let h1 = a1.mapv(gelu);
        let a2 = self.c2.forward(h1.view());
        let h2 = a2.mapv(gelu);
        let f_chw = self.c3.forward(h2.view());
        (chw_to_hwc(&f_chw), EncoderCache { a1, h1, a2, h2 })
    }

    /// df is [h, w, feat]; accumulates parameter grads.
    pub(crate) fn backward(
        &mut self,
        x: ArrayView3<'_, f64>,
        cache: &EncoderCache,
        df: &Array3<f64>,
    ) {
        use crate::nn::gelu_grad;
        let df_chw = hwc_to_chw(df);
        let dh2 = self.c3.backward(cache.h2.view(), &df_chw);
        let da2 = &dh2 * &cache.a2.mapv(gelu_grad);
        let dh1 = self.c2.backward(cache.h1.view(), &da2);
        let da1 = &dh1 * &cache.a1.mapv(gelu_grad);
        let _ = self.c1.backward(x, &da1);
    }
}

impl HasParams for ConvEncoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.c1.visit_params(&scoped(prefix, "c1"), f);
        self.c2.visit_params(&scoped(prefix, "c2"), f);
        self.c3.visit_params(&scoped(prefix, "c3"), f);
    }
}

/// Mirror of the encoder: two nearest-neighbor 2x upsamplings.
#[derive(Debug, Clone)]
pub struct ConvDecoder {
    pub d1: Conv2d,
    pub d2: Conv2d,
    pub d3: Conv2d,
    pub d4: Conv2d,
}

pub(crate) struct DecoderCache {
    pub g_chw: Array3<f64>,
    pub a1: Array3<f64>,
    pub u1: Array3<f64>,
    pub a2: Array3<f64>,
    pub u2: Array3<f64>,
    pub a3: Array3<f64>,
    pub h3: Array3<f64>,
}

impl ConvDecoder {
    pub fn new(rng: &mut SeedRng, meta: &TokenizerMeta) -> Self {
        Self {
            d1: Conv2d::new(rng, meta.feat_dim, meta.width2, 1),
            d2: Conv2d::new(rng, meta.width2, meta.width1, 1),
            d3: Conv2d::new(rng, meta.width1, meta.width1, 1),
            d4: Conv2d::new(rng, meta.width1, meta.img_channels, 1),
        }
    }

    /// g is [h, w, feat]; output is CHW at 4x the latent resolution, unclamped.
    pub fn forward(&self, g: &Array3<f64>) -> Array3<f64> {
        let (y, _) = self.forward_cached(g);
        y
    }

    pub(crate) fn forward_cached(&self, g: &Array3<f64>) -> (Array3<f64>, DecoderCache) {
        let g_chw = hwc_to_chw(g);
        let a1 = self.d1.forward(g_chw.view());
        let h1 = a1.mapv(gelu);
        let u1 = nearest_upsample2_chw(h1.view());
        let a2 = self.d2.forward(u1.view());
        let h2 = a2.mapv(gelu);
        let u2 = nearest_upsample2_chw(h2.view());
        let a3 = self.d3.forward(u2.view());
        let h3 = a3.mapv(gelu);
        let y = self.d4.forward(h3.view());
        (
            y,
            DecoderCache {
                g_chw,
                a1,
                u1,
                a2,
                u2,
                a3,
                h3,
            },
        )
    }

    /// dy is CHW; returns grad w.r.t. g as [h, w, feat].
    pub(crate) fn backward(&mut self, cache: &DecoderCache, dy: &Array3<f64>) -> Array3<f64> {
        use crate::nn::gelu_grad;
        use crate::nn::resample::nearest_upsample2_chw_adjoint;
        let dh3 = self.d4.backward(cache.h3.view(), dy);
        let da3 = &dh3 * &cache.a3.mapv(gelu_grad);
        let du2 = self.d3.backward(cache.u2.view(), &da3);
        let dh2 = nearest_upsample2_chw_adjoint(du2.view());
        let da2 = &dh2 * &cache.a2.mapv(gelu_grad);
        let du1 = self.d2.backward(cache.u1.view(), &da2);
        let dh1 = nearest_upsample2_chw_adjoint(du1.view());
        let da1 = &dh1 * &cache.a1.mapv(gelu_grad);
        let dg_chw = self.d1.backward(cache.g_chw.view(), &da1);
        chw_to_hwc(&dg_chw)
    }
}

impl HasParams for ConvDecoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.d1.visit_params(&scoped(prefix, "d1"), f);
        self.d2.visit_params(&scoped(prefix, "d2"), f);
        self.d3.visit_params(&scoped(prefix, "d3"), f);
        self.d4.visit_params(&scoped(prefix, "d4"), f);
    }
}

/// Everything needed to tokenize and reconstruct images.
#[derive(Debug, Clone)]
pub struct TokenizerParams {
    pub encoder: ConvEncoder,
    pub decoder: ConvDecoder,
    pub codebook: Codebook,
    pub schedule: ScaleSchedule,
    pub meta: TokenizerMeta,
}

impl HasParams for TokenizerParams {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.encoder.visit_params(&scoped(prefix, "encoder"), f);
        self.decoder.visit_params(&scoped(prefix, "decoder"), f);
        f(ParamMut {
            name: scoped(prefix, "codebook"),
            value: self.codebook.vectors.view_mut().into_dyn(),
            grad: self.codebook.grad.view_mut().into_dyn(),
        });
    }
}

impl TokenizerParams {
    /// Fresh, untrained tokenizer with a seeded random codebook.
    pub fn init(meta: TokenizerMeta, schedule: ScaleSchedule, seed: u64) -> Result<Self> {
        let (lh, lw) = schedule.latent_hw();
        if lh != meta.img_h.div_ceil(4) || lw != meta.img_w.div_ceil(4) {
            return Err(Error::shape(
                "schedule latent grid",
                format!("{}x{}", meta.img_h.div_ceil(4), meta.img_w.div_ceil(4)),
                format!("{lh}x{lw}"),
            ));
        }
        let mut rng = derive_rng(seed, "tokenizer-init");
        let encoder = ConvEncoder::new(&mut rng, &meta);
        let decoder = ConvDecoder::new(&mut rng, &meta);
        let codebook = Codebook::new(crate::nn::init::normal_mat(
            &mut rng,
            meta.vocab,
            meta.feat_dim,
            0.5,
        ));
        Ok(Self {
            encoder,
            decoder,
            codebook,
            schedule,
            meta,
        })
    }
}

pub(crate) fn chw_to_hwc(x: &Array3<f64>) -> Array3<f64> {
    x.view().permuted_axes([1, 2, 0]).to_owned()
}

pub(crate) fn hwc_to_chw(x: &Array3<f64>) -> Array3<f64> {
    x.view().permuted_axes([2, 0, 1]).to_owned()
}

/// Encoder pass. Deterministic for fixed params.
pub fn encode(image: &Image, params: &TokenizerParams) -> Result<FeatureMap> {
    let (c, h, w) = image.dims();
    if c != params.meta.img_channels || h != params.meta.img_h || w != params.meta.img_w {
        return Err(Error::shape(
            "encoder input",
            format!(
                "{}x{}x{}",
                params.meta.img_channels, params.meta.img_h, params.meta.img_w
            ),
            format!("{c}x{h}x{w}"),
        ));
    }
    Ok(FeatureMap {
        values: params.encoder.forward(image.pixels()),
    })
}

/// Per-scale intermediates from the residual quantization loop; used by the
/// trainer, not needed for plain tokenization.
pub(crate) struct QuantizeTrace {
    /// Downsampled residual per scale, [h_k, w_k, feat].
    pub inputs: Vec<Array3<f64>>,
    /// Looked-up codebook vectors per scale, [h_k, w_k, feat].
    pub lookups: Vec<Array3<f64>>,
    /// Sum of upsampled lookups, [h, w, feat].
    pub quantized: Array3<f64>,
}

pub(crate) fn quantize_with_trace(
    f: &FeatureMap,
    params: &TokenizerParams,
) -> Result<(MultiScaleTokenMap, QuantizeTrace)> {
    let (h, w) = f.hw();
    let (lh, lw) = params.schedule.latent_hw();
    if (h, w) != (lh, lw) || f.feat_dim() != params.meta.feat_dim {
        return Err(Error::shape(
            "feature map",
            format!("{lh}x{lw}x{}", params.meta.feat_dim),
            format!("{h}x{w}x{}", f.feat_dim()),
        ));
    }
    let c = params.meta.feat_dim;
    let mut residual = f.values.clone();
    let mut maps = Vec::with_capacity(params.schedule.num_scales());
    let mut inputs = Vec::new();
    let mut lookups = Vec::new();
    let mut quantized = Array3::<f64>::zeros((h, w, c));

    for k in 0..params.schedule.num_scales() {
        let (hk, wk) = params.schedule.side(k);
        let z = bilinear_resize(residual.view(), hk, wk);
        let mut ids = Array2::<u32>::zeros((hk, wk));
        let mut looked = Array3::<f64>::zeros((hk, wk, c));
        for i in 0..hk {
            for j in 0..wk {
                let cell: Vec<f64> = z.index_axis(Axis(0), i).row(j).to_vec();
                let id = params.codebook.nearest(&cell);
                ids[(i, j)] = id;
                looked
                    .index_axis_mut(Axis(0), i)
                    .row_mut(j)
                    .assign(&params.codebook.vectors.row(id as usize));
            }
        }
        let up = bilinear_resize(looked.view(), h, w);
        residual -= &up;
        quantized += &up;
        maps.push(ids);
        inputs.push(z);
        lookups.push(looked);
    }

    Ok((
        MultiScaleTokenMap {
            maps,
            schedule: params.schedule.clone(),
        },
        QuantizeTrace {
            inputs,
            lookups,
            quantized,
        },
    ))
}

/// Residual coarse-to-fine quantization of a feature map.
pub fn multiscale_quantize(f: &FeatureMap, params: &TokenizerParams) -> Result<MultiScaleTokenMap> {
    Ok(quantize_with_trace(f, params)?.0)
}

/// Sum of upsampled codebook lookups, [h, w, feat].
pub fn dequantize(tokens: &MultiScaleTokenMap, params: &TokenizerParams) -> Result<Array3<f64>> {
    tokens.validate(params.codebook.vocab())?;
    let (h, w) = params.schedule.latent_hw();
    let c = params.meta.feat_dim;
    if tokens.schedule != params.schedule {
        return Err(Error::shape(
            "token schedule",
            format!("{:?}", params.schedule.sides()),
            format!("{:?}", tokens.schedule.sides()),
        ));
    }
    let mut acc = Array3::<f64>::zeros((h, w, c));
    for (k, map) in tokens.maps.iter().enumerate() {
        let (hk, wk) = params.schedule.side(k);
        let mut looked = Array3::<f64>::zeros((hk, wk, c));
        for i in 0..hk {
            for j in 0..wk {
                looked
                    .index_axis_mut(Axis(0), i)
                    .row_mut(j)
                    .assign(&params.codebook.vectors.row(map[(i, j)] as usize));
            }
        }
        acc += &bilinear_resize(looked.view(), h, w);
    }
    Ok(acc)
}

/// Reconstruct an image from tokens; output clamped to [0, 1].
pub fn lookup_decode(tokens: &MultiScaleTokenMap, params: &TokenizerParams) -> Result<Image> {
    let acc = dequantize(tokens, params)?;
    let y = params.decoder.forward(&acc);
    Ok(Image::from_clamped(y))
}

/// f + Gaussian noise with std `sigma`, seed-deterministic.
pub fn perturb_features(f: &FeatureMap, sigma: f64, rng_seed: u64) -> Result<FeatureMap> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Parameter(format!(
            "sigma must be finite and >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(f.clone());
    }
    let mut rng = derive_rng(rng_seed, "feature-noise");
    let dist = Normal::new(0.0, sigma).expect("valid normal");
    let mut values = f.values.clone();
    values.mapv_inplace(|v| v + dist.sample(&mut rng));
    Ok(FeatureMap { values })
}

/// Mean fraction of token positions that change when `f` is perturbed with
/// noise of std `sigma`, over `n_trials` independent draws.
pub fn token_change_fraction(
    f: &FeatureMap,
    sigma: f64,
    n_trials: usize,
    params: &TokenizerParams,
    rng_seed: u64,
) -> Result<f64> {
    if n_trials == 0 {
        return Err(Error::Parameter("n_trials must be >= 1".into()));
    }
    let baseline = multiscale_quantize(f, params)?;
    let total = baseline.total_tokens() as f64;
    let mut acc = 0.0;
    for t in 0..n_trials {
        let noised = perturb_features(f, sigma, rng_seed.wrapping_add(t as u64))?;
        let tokens = multiscale_quantize(&noised, params)?;
        let changed: usize = baseline
            .maps
            .iter()
            .zip(tokens.maps.iter())
            .map(|(a, b)| a.iter().zip(b.iter()).filter(|(x, y)| x != y).count())
            .sum();
        acc += changed as f64 / total;
    }
    Ok(acc / n_trials as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_params() -> TokenizerParams {
        let meta = TokenizerMeta {
            img_channels: 1,
            img_h: 28,
            img_w: 28,
            feat_dim: 8,
            vocab: 16,
            width1: 4,
            width2: 6,
        };
        TokenizerParams::init(meta, ScaleSchedule::desk_default(), 11).unwrap()
    }

    fn tiny_image(seed: u64) -> Image {
        use rand::Rng;
        let mut rng = crate::rng::rng_from_seed(seed);
        Image::new(Array3::from_shape_fn((1, 28, 28), |_| rng.random::<f64>())).unwrap()
    }

    #[test]
    fn desk_schedule_counts() {
        let s = ScaleSchedule::desk_default();
        assert_eq!(s.total_tokens(), 88);
        assert_eq!(s.prefix_tokens(1), 1);
        assert_eq!(s.prefix_tokens(3), 14);
    }

    #[test]
    fn reference_schedule_totals_680_and_prefix_55() {
        let s = ScaleSchedule::reference();
        assert_eq!(s.total_tokens(), 680);
        assert_eq!(s.prefix_tokens(5), 55);
    }

    #[test]
    fn schedule_rejects_decreasing_sides() {
        assert!(ScaleSchedule::new(vec![(2, 2), (1, 1)]).is_err());
        assert!(ScaleSchedule::new(vec![]).is_err());
    }

    #[test]
    fn encode_shape_and_determinism() {
        let p = tiny_params();
        let img = tiny_image(1);
        let f1 = encode(&img, &p).unwrap();
        let f2 = encode(&img, &p).unwrap();
        assert_eq!(f1.values.dim(), (7, 7, 8));
        assert_eq!(f1.values, f2.values);
    }

    #[test]
    fn encode_rejects_wrong_dims() {
        let p = tiny_params();
        let img = Image::new(Array3::zeros((1, 14, 14))).unwrap();
        assert!(matches!(
            encode(&img, &p),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn encode_zero_image_is_finite() {
        let p = tiny_params();
        let img = Image::new(Array3::zeros((1, 28, 28))).unwrap();
        let f = encode(&img, &p).unwrap();
        assert!(f.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn quantize_is_deterministic_and_in_range() {
        let p = tiny_params();
        let f = encode(&tiny_image(2), &p).unwrap();
        let t1 = multiscale_quantize(&f, &p).unwrap();
        let t2 = multiscale_quantize(&f, &p).unwrap();
        assert_eq!(t1, t2);
        t1.validate(p.codebook.vocab()).unwrap();
        assert_eq!(t1.total_tokens(), 88);
    }

    #[test]
    fn decode_rejects_out_of_range_token() {
        let p = tiny_params();
        let f = encode(&tiny_image(3), &p).unwrap();
        let mut t = multiscale_quantize(&f, &p).unwrap();
        t.maps[0][(0, 0)] = 999;
        assert!(matches!(
            lookup_decode(&t, &p),
            Err(Error::InvalidToken { id: 999, .. })
        ));
    }

    #[test]
    fn decode_all_zero_tokens_finite_and_deterministic() {
        let p = tiny_params();
        let maps = p
            .schedule
            .sides()
            .iter()
            .map(|&(h, w)| Array2::zeros((h, w)))
            .collect();
        let t = MultiScaleTokenMap {
            maps,
            schedule: p.schedule.clone(),
        };
        let a = lookup_decode(&t, &p).unwrap();
        let b = lookup_decode(&t, &p).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn perturb_zero_sigma_is_identity() {
        let p = tiny_params();
        let f = encode(&tiny_image(4), &p).unwrap();
        let g = perturb_features(&f, 0.0, 99).unwrap();
        assert_eq!(f.values, g.values);
    }

    #[test]
    fn perturb_same_seed_identical() {
        let p = tiny_params();
        let f = encode(&tiny_image(5), &p).unwrap();
        let a = perturb_features(&f, 0.3, 42).unwrap();
        let b = perturb_features(&f, 0.3, 42).unwrap();
        assert_eq!(a.values, b.values);
        let c = perturb_features(&f, 0.3, 43).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn perturb_rejects_negative_sigma() {
        let p = tiny_params();
        let f = encode(&tiny_image(6), &p).unwrap();
        assert!(perturb_features(&f, -0.1, 0).is_err());
    }

    #[test]
    fn change_fraction_zero_sigma_is_zero() {
        let p = tiny_params();
        let f = encode(&tiny_image(7), &p).unwrap();
        let frac = token_change_fraction(&f, 0.0, 3, &p, 1).unwrap();
        assert_eq!(frac, 0.0);
    }

    #[test]
    fn change_fraction_bounded() {
        let p = tiny_params();
        let f = encode(&tiny_image(8), &p).unwrap();
        for &sigma in &[0.01, 0.5, 5.0] {
            let frac = token_change_fraction(&f, sigma, 2, &p, 5).unwrap();
            assert!((0.0..=1.0).contains(&frac), "fraction {frac} out of range");
        }
    }

    #[test]
    fn roundtrip_same_tokens_same_image() {
        let p = tiny_params();
        let f = encode(&tiny_image(9), &p).unwrap();
        let t = multiscale_quantize(&f, &p).unwrap();
        let a = lookup_decode(&t, &p).unwrap();
        let b = lookup_decode(&t, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_entry_codebook_forces_token_zero() {
        let meta = TokenizerMeta {
            img_channels: 1,
            img_h: 28,
            img_w: 28,
            feat_dim: 8,
            vocab: 1,
            width1: 4,
            width2: 6,
        };
        let p = TokenizerParams::init(meta, ScaleSchedule::desk_default(), 3).unwrap();
        let f = encode(&tiny_image(10), &p).unwrap();
        let t = multiscale_quantize(&f, &p).unwrap();
        assert!(t.maps.iter().all(|m| m.iter().all(|&id| id == 0)));
    }

    #[test]
    fn dequantize_matches_manual_sum() {
        let p = tiny_params();
        let f = encode(&tiny_image(12), &p).unwrap();
        let (t, trace) = quantize_with_trace(&f, &p).unwrap();
        let acc = dequantize(&t, &p).unwrap();
        assert_relative_eq!(
            (&acc - &trace.quantized).mapv(f64::abs).sum(),
            0.0,
            epsilon = 1e-12
        );
    }
}
