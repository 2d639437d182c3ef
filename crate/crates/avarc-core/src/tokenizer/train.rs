//! Tokenizer training: reconstruction loss plus codebook/commitment terms,
//! with straight-through gradients across the quantization step.

use ndarray::Axis;
use rand::seq::SliceRandom;

use super::{quantize_with_trace, FeatureMap, Image, ScaleSchedule, TokenizerMeta, TokenizerParams};
use crate::error::{Error, Result};
use crate::nn::parallel::accumulate_batch;
use crate::nn::resample::bilinear_resize_adjoint;
use crate::nn::{Adam, AdamConfig, HasParams};
use crate::rng::derive_rng;

#[derive(Debug, Clone)]
pub struct TokenizerTrainConfig {
    pub vocab: usize,
    pub feat_dim: usize,
    pub width1: usize,
    pub width2: usize,
    pub schedule: ScaleSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub commitment_weight: f64,
    pub seed: u64,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        Self {
            vocab: 512,
            feat_dim: 32,
            width1: 16,
            width2: 32,
            schedule: ScaleSchedule::desk_default(),
            epochs: 6,
            batch_size: 64,
            lr: 1e-3,
            commitment_weight: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TokenizerTrainReport {
    /// Total loss per optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean reconstruction MSE per epoch.
    pub epoch_recon: Vec<f64>,
}

struct SampleStats {
    recon: f64,
    vq: f64,
}

/// One forward/backward on a single image; accumulates grads in `params`.
fn train_step(params: &mut TokenizerParams, image: &Image, commitment: f64) -> SampleStats {
    let x = image.pixels();
    let (f, enc_cache) = params.encoder.forward_cached(x);
    let fm = FeatureMap { values: f };
    let (_tokens, trace) =
        quantize_with_trace(&fm, params).expect("training features match own schedule");

    // Decoder sees the quantized features; the encoder receives the decoder's
    // input gradient unchanged (straight-through).
    let (y, dec_cache) = params.decoder.forward_cached(&trace.quantized);
    let diff = &y - &x;
    let numel = diff.len() as f64;
    let recon = diff.iter().map(|d| d * d).sum::<f64>() / numel;
    let dy = diff.mapv(|d| 2.0 * d / numel);
    let dg = params.decoder.backward(&dec_cache, &dy);

    let mut df = dg;
    let k_total = params.schedule.num_scales() as f64;
    let (h, w) = params.schedule.latent_hw();
    let mut vq = 0.0;
    for k in 0..params.schedule.num_scales() {
        let z = &trace.inputs[k];
        let e = &trace.lookups[k];
        let numel_k = z.len() as f64;
        let delta = z - e; // z_k - e_k
        let scale_mse = delta.iter().map(|d| d * d).sum::<f64>() / numel_k;
        vq += (1.0 + commitment) * scale_mse / k_total;

        // codebook term: pulls selected entries toward the (stop-gradient) residual
        let ids = &_tokens.maps[k];
        let (hk, wk) = params.schedule.side(k);
        for i in 0..hk {
            for j in 0..wk {
                let id = ids[(i, j)] as usize;
                let d_cell = delta.index_axis(Axis(0), i);
                let d_cell = d_cell.row(j);
                let mut g_row = params.codebook.grad.row_mut(id);
                for (g, d) in g_row.iter_mut().zip(d_cell.iter()) {
                    *g += -2.0 * d / (numel_k * k_total);
                }
            }
        }

        // commitment term: pulls the encoder toward the chosen entries
        let dz = delta.mapv(|d| 2.0 * commitment * d / (numel_k * k_total));
        df += &bilinear_resize_adjoint(dz.view(), h, w);
    }

    params.encoder.backward(x, &enc_cache, &df);
    SampleStats { recon, vq }
}

/// Seed the codebook from encoder outputs so early quantization lands in a
/// populated region of feature space.
fn init_codebook_from_data(params: &mut TokenizerParams, dataset: &[Image], seed: u64) {
    use rand::Rng;
    let mut rng = derive_rng(seed, "codebook-init");
    let n_probe = dataset.len().min(64);
    let mut cells: Vec<Vec<f64>> = Vec::new();
    for image in dataset.iter().take(n_probe) {
        let f = params.encoder.forward(image.pixels());
        let (h, w, _) = f.dim();
        for i in 0..h {
            for j in 0..w {
                cells.push(f.index_axis(Axis(0), i).row(j).to_vec());
            }
        }
    }
    let vocab = params.codebook.vocab();
    for v in 0..vocab {
        let pick = &cells[rng.random_range(0..cells.len())];
        let mut row = params.codebook.vectors.row_mut(v);
        for (dst, src) in row.iter_mut().zip(pick.iter()) {
            *dst = src + 0.01 * (rng.random::<f64>() - 0.5);
        }
    }
}

/// Train a tokenizer from scratch on `dataset`.
pub fn train_tokenizer(
    dataset: &[Image],
    cfg: &TokenizerTrainConfig,
) -> Result<(TokenizerParams, TokenizerTrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Data("tokenizer training dataset is empty".into()));
    }
    let (c, h, w) = dataset[0].dims();
    for (i, img) in dataset.iter().enumerate() {
        if img.dims() != (c, h, w) {
            return Err(Error::shape(
                format!("dataset image {i}"),
                format!("{c}x{h}x{w}"),
                format!("{:?}", img.dims()),
            ));
        }
    }
    let meta = TokenizerMeta {
        img_channels: c,
        img_h: h,
        img_w: w,
        feat_dim: cfg.feat_dim,
        vocab: cfg.vocab,
        width1: cfg.width1,
        width2: cfg.width2,
    };
    let mut params = TokenizerParams::init(meta, cfg.schedule.clone(), cfg.seed)?;
    init_codebook_from_data(&mut params, dataset, cfg.seed);

    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut shuffle_rng = derive_rng(cfg.seed, "tokenizer-shuffle");
    let mut report = TokenizerTrainReport {
        step_losses: Vec::new(),
        epoch_recon: Vec::new(),
    };

    let commitment = cfg.commitment_weight;
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_recon = 0.0;
        for batch_ids in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&Image> = batch_ids.iter().map(|&i| &dataset[i]).collect();
            let stats = accumulate_batch(&mut params, &batch, |worker, img| {
                train_step(worker, img, commitment)
            });
            let inv = 1.0 / batch.len() as f64;
            // average the summed gradients over the batch
            params.visit_params("", &mut |mut p| p.grad.mapv_inplace(|g| g * inv));
            adam.step(&mut params);
            let loss: f64 = stats.iter().map(|s| s.recon + s.vq).sum::<f64>() * inv;
            epoch_recon += stats.iter().map(|s| s.recon).sum::<f64>();
            report.step_losses.push(loss);
        }
        report.epoch_recon.push(epoch_recon / dataset.len() as f64);
    }

    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{encode, lookup_decode, multiscale_quantize};
    use ndarray::Array3;

    fn blob_image() -> Image {
        // a soft blob; cheap stand-in for a digit
        Image::new(Array3::from_shape_fn((1, 28, 28), |(_, y, x)| {
            let dy = y as f64 - 14.0;
            let dx = x as f64 - 10.0;
            (-(dy * dy + dx * dx) / 40.0).exp()
        }))
        .unwrap()
    }

    fn small_cfg() -> TokenizerTrainConfig {
        TokenizerTrainConfig {
            vocab: 32,
            feat_dim: 8,
            width1: 8,
            width2: 12,
            epochs: 60,
            batch_size: 4,
            lr: 3e-3,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn overfits_single_image() {
        let data = vec![blob_image()];
        let (params, _report) = train_tokenizer(&data, &small_cfg()).unwrap();
        let f = encode(&data[0], &params).unwrap();
        let t = multiscale_quantize(&f, &params).unwrap();
        let rec = lookup_decode(&t, &params).unwrap();
        let mse = (&rec.pixels() - &data[0].pixels())
            .mapv(|d| d * d)
            .mean()
            .unwrap();
        assert!(mse < 0.01, "reconstruction mse {mse} not < 0.01");
    }

    #[test]
    fn same_seed_same_loss_trace() {
        let data = vec![blob_image(), blob_image()];
        let mut cfg = small_cfg();
        cfg.epochs = 3;
        let (_, r1) = train_tokenizer(&data, &cfg).unwrap();
        let (_, r2) = train_tokenizer(&data, &cfg).unwrap();
        assert_eq!(r1.step_losses, r2.step_losses);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(matches!(
            train_tokenizer(&[], &small_cfg()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn vocab_one_training_yields_all_zero_tokens() {
        let mut cfg = small_cfg();
        cfg.vocab = 1;
        cfg.epochs = 2;
        let data = vec![blob_image()];
        let (params, _) = train_tokenizer(&data, &cfg).unwrap();
        let f = encode(&data[0], &params).unwrap();
        let t = multiscale_quantize(&f, &params).unwrap();
        assert!(t.maps.iter().all(|m| m.iter().all(|&id| id == 0)));
    }
}
