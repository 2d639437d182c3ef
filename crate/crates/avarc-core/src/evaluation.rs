//! Metrics and experiment harnesses: top-k accuracy, the scale sweep, the
//! smoothing/CCA ablation grid, and the feature-noise experiment.

use std::time::Instant;

use serde::Serialize;

use crate::classifier::LikelihoodMethod;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{smoothed_token_maps, ClassLabel, NextScaleModel, SmoothingConfig};
use crate::nn::log_sum_exp;
use crate::nn::parallel::ordered_par_map;
use crate::tokenizer::{
    encode, lookup_decode, multiscale_quantize, perturb_features, token_change_fraction,
    TokenizerParams,
};

/// One emitted measurement; serialized to CSV / JSON-lines.
#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkRecord {
    pub experiment: String,
    pub config_hash: String,
    pub metric: String,
    pub value: f64,
    pub wall_ms: f64,
    pub seed: u64,
    pub timestamp: u64,
}

impl BenchmarkRecord {
    pub fn new(experiment: &str, config_hash: u64, metric: &str, value: f64, wall_ms: f64, seed: u64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Parameter(format!(
                "record value for {metric} must be finite, got {value}"
            )));
        }
        if wall_ms < 0.0 {
            return Err(Error::Parameter("wall_ms must be >= 0".into()));
        }
        Ok(Self {
            experiment: experiment.into(),
            config_hash: format!("{config_hash:016x}"),
            metric: metric.into(),
            value,
            wall_ms,
            seed,
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        })
    }
}

/// Fraction of examples whose true label ranks among the k highest scores.
/// `scores[i][c]` is example i's score for class c. k clamps to the class
/// count; ties resolve toward smaller class ids (they enter the top-k first).
pub fn topk_accuracy(scores: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Parameter("k must be >= 1".into()));
    }
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::shape("topk inputs", labels.len(), scores.len()));
    }
    let n_classes = scores[0].len();
    let k = k.min(n_classes);
    let mut hits = 0usize;
    for (row, &label) in scores.iter().zip(labels.iter()) {
        if row.len() != n_classes {
            return Err(Error::shape("score row", n_classes, row.len()));
        }
        let mut order: Vec<usize> = (0..n_classes).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        if order[..k].contains(&label) {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Per-class log-likelihood score table of a dataset under one method.
/// Returns (scores, mean per-image milliseconds).
pub fn score_table(
    dataset: &Dataset,
    model: &NextScaleModel,
    tokenizer: &TokenizerParams,
    method: LikelihoodMethod,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let n_classes = model.n_classes();
    let images: Vec<&crate::tokenizer::Image> = dataset.images.iter().collect();
    let start = Instant::now();
    let rows = ordered_par_map(&images, |img| -> Result<Vec<f64>> {
        let f = encode(img, tokenizer)?;
        let tokens = multiscale_quantize(&f, tokenizer)?;
        match method {
            LikelihoodMethod::Full => (0..n_classes)
                .map(|y| Ok(model.log_likelihood_full(&tokens, ClassLabel::Class(y))?.total))
                .collect(),
            LikelihoodMethod::Partial { upto_scale } => {
                let upto = upto_scale.min(model.num_scales());
                (0..n_classes)
                    .map(|y| {
                        Ok(model
                            .log_likelihood_partial(&tokens, ClassLabel::Class(y), upto)?
                            .total)
                    })
                    .collect()
            }
            LikelihoodMethod::Smoothed { samples, sigma } => {
                let cfg = SmoothingConfig {
                    samples,
                    sigma,
                    rng_seed: seed,
                };
                let maps = smoothed_token_maps(&f, tokenizer, &cfg)?;
                (0..n_classes)
                    .map(|y| {
                        let mut totals = Vec::with_capacity(maps.len());
                        for m in &maps {
                            totals.push(model.log_likelihood_full(m, ClassLabel::Class(y))?.total);
                        }
                        Ok(log_sum_exp(&totals))
                    })
                    .collect()
            }
        }
    });
    let mean_ms = start.elapsed().as_secs_f64() * 1e3 / dataset.len() as f64;
    let mut table = Vec::with_capacity(rows.len());
    for r in rows {
        table.push(r?);
    }
    Ok((table, mean_ms))
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub upto_scale: usize,
    pub tokens_evaluated: usize,
    pub topk: usize,
    pub topk_accuracy: f64,
    pub top1_accuracy: f64,
    pub mean_ms: f64,
}

/// Partial-scale ranking quality and latency per truncation depth. The
/// reported top-k uses k = min(10, n_classes).
pub fn scale_sweep(
    dataset: &Dataset,
    model: &NextScaleModel,
    tokenizer: &TokenizerParams,
    upto_scales: &[usize],
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if upto_scales.is_empty() {
        return Err(Error::Parameter("no scales requested".into()));
    }
    let schedule = model.schedule();
    for &u in upto_scales {
        if u == 0 || u > schedule.num_scales() {
            return Err(Error::Parameter(format!(
                "upto_scale {u} outside [1, {}]",
                schedule.num_scales()
            )));
        }
    }
    let k = 10.min(model.n_classes());
    let mut points = Vec::with_capacity(upto_scales.len());
    let mut prev_tokens = 0usize;
    for &upto in upto_scales {
        let tokens_evaluated = schedule.prefix_tokens(upto);
        // work is monotone in depth by construction of the prefix
        debug_assert!(tokens_evaluated >= prev_tokens);
        prev_tokens = tokens_evaluated;
        let (table, mean_ms) = score_table(
            dataset,
            model,
            tokenizer,
            LikelihoodMethod::Partial { upto_scale: upto },
            seed,
        )?;
        points.push(SweepPoint {
            upto_scale: upto,
            tokens_evaluated,
            topk: k,
            topk_accuracy: topk_accuracy(&table, &dataset.labels, k)?,
            top1_accuracy: topk_accuracy(&table, &dataset.labels, 1)?,
            mean_ms,
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub smoothing: bool,
    pub cca: bool,
    pub top1: f64,
    pub wall_ms: f64,
}

/// The 2x2 smoothing/CCA grid. Smoothing re-scores the top-10 candidates of
/// a standard full-likelihood ranking with the smoothed estimator.
pub fn ablation_grid(
    dataset: &Dataset,
    base_model: &NextScaleModel,
    cca_model: &NextScaleModel,
    tokenizer: &TokenizerParams,
    smoothing: SmoothingConfig,
    seed: u64,
) -> Result<Vec<AblationCell>> {
    smoothing.validate()?;
    let mut cells = Vec::with_capacity(4);
    for (cca, model) in [(false, base_model), (true, cca_model)] {
        // smoothing off: plain full-likelihood argmax
        let t0 = Instant::now();
        let (table, _) = score_table(dataset, model, tokenizer, LikelihoodMethod::Full, seed)?;
        let top1 = topk_accuracy(&table, &dataset.labels, 1)?;
        cells.push(AblationCell {
            smoothing: false,
            cca,
            top1,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });

        // smoothing on: smoothed re-scoring of the full-likelihood top-10
        let t0 = Instant::now();
        let images: Vec<(usize, &crate::tokenizer::Image)> =
            dataset.images.iter().enumerate().collect();
        let preds = ordered_par_map(&images, |(i, img)| -> Result<usize> {
            let f = encode(img, tokenizer)?;
            let row = &table[*i];
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| {
                row[b]
                    .partial_cmp(&row[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let shortlist = &order[..10.min(order.len())];
            let maps = smoothed_token_maps(&f, tokenizer, &smoothing)?;
            let mut best = (shortlist[0], f64::NEG_INFINITY);
            for &y in shortlist {
                let mut totals = Vec::with_capacity(maps.len());
                for m in &maps {
                    totals.push(model.log_likelihood_full(m, ClassLabel::Class(y))?.total);
                }
                let s = log_sum_exp(&totals);
                if s > best.1 || (s == best.1 && y < best.0) {
                    best = (y, s);
                }
            }
            Ok(best.0)
        });
        let mut hits = 0usize;
        for (p, &label) in preds.into_iter().zip(dataset.labels.iter()) {
            if p? == label {
                hits += 1;
            }
        }
        cells.push(AblationCell {
            smoothing: true,
            cca,
            top1: hits as f64 / dataset.len() as f64,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(cells)
}

#[derive(Debug, Clone, Serialize)]
pub struct NoiseRow {
    pub sigma: f64,
    pub change_fraction: f64,
    pub recon_mse: f64,
    pub loglik_gap: f64,
}

/// Per noise level: mean token-change fraction, mean reconstruction MSE
/// between clean and perturbed decodes, and the mean absolute shift of the
/// true-label full log-likelihood.
pub fn noise_experiment(
    dataset: &Dataset,
    sigmas: &[f64],
    tokenizer: &TokenizerParams,
    model: &NextScaleModel,
    seed: u64,
) -> Result<Vec<NoiseRow>> {
    if sigmas.is_empty() {
        return Err(Error::Parameter("no sigmas requested".into()));
    }
    let pairs: Vec<(&crate::tokenizer::Image, usize)> = dataset.iter().collect();
    let mut rows = Vec::with_capacity(sigmas.len());
    for (si, &sigma) in sigmas.iter().enumerate() {
        let stats = ordered_par_map(&pairs, |(img, y)| -> Result<(f64, f64, f64)> {
            let f = encode(img, tokenizer)?;
            let sample_seed = seed.wrapping_add(si as u64).wrapping_mul(0x9e37_79b9);
            let frac = token_change_fraction(&f, sigma, 1, tokenizer, sample_seed)?;
            let clean_tokens = multiscale_quantize(&f, tokenizer)?;
            let noised = perturb_features(&f, sigma, sample_seed)?;
            let noised_tokens = multiscale_quantize(&noised, tokenizer)?;
            let clean_img = lookup_decode(&clean_tokens, tokenizer)?;
            let noised_img = lookup_decode(&noised_tokens, tokenizer)?;
            let mse = (&clean_img.pixels() - &noised_img.pixels())
                .mapv(|d| d * d)
                .mean()
                .unwrap();
            let ll_clean = model
                .log_likelihood_full(&clean_tokens, ClassLabel::Class(*y))?
                .total;
            let ll_noised = model
                .log_likelihood_full(&noised_tokens, ClassLabel::Class(*y))?
                .total;
            Ok((frac, mse, (ll_clean - ll_noised).abs()))
        });
        let mut acc = (0.0, 0.0, 0.0);
        for s in stats {
            let (f, m, g) = s?;
            acc = (acc.0 + f, acc.1 + m, acc.2 + g);
        }
        let n = pairs.len() as f64;
        rows.push(NoiseRow {
            sigma,
            change_fraction: acc.0 / n,
            recon_mse: acc.1 / n,
            loglik_gap: acc.2 / n,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_full_k_is_always_one() {
        let scores = vec![vec![0.1, 0.9, 0.3], vec![0.5, 0.2, 0.8]];
        let labels = vec![0, 2];
        assert_eq!(topk_accuracy(&scores, &labels, 3).unwrap(), 1.0);
        // k beyond the class count clamps
        assert_eq!(topk_accuracy(&scores, &labels, 99).unwrap(), 1.0);
    }

    #[test]
    fn topk_perfect_scores() {
        let scores = vec![vec![9.0, 0.0], vec![0.0, 9.0]];
        let labels = vec![0, 1];
        for k in 1..=2 {
            assert_eq!(topk_accuracy(&scores, &labels, k).unwrap(), 1.0);
        }
    }

    #[test]
    fn topk_hand_enumerated() {
        // example 0: ranking 2,0,1 ; example 1: ranking 1,0,2 ; example 2: 0,2,1
        let scores = vec![
            vec![0.4, 0.1, 0.9],
            vec![0.3, 0.8, 0.1],
            vec![0.9, 0.2, 0.5],
        ];
        let labels = vec![0, 2, 2];
        assert_eq!(topk_accuracy(&scores, &labels, 1).unwrap(), 0.0);
        // top-2 hits: ex0 (0 in {2,0}), ex1 (2 not in {1,0}), ex2 (2 in {0,2})
        assert!((topk_accuracy(&scores, &labels, 2).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(topk_accuracy(&scores, &labels, 3).unwrap(), 1.0);
    }

    #[test]
    fn topk_rejects_bad_input() {
        assert!(topk_accuracy(&[], &[], 1).is_err());
        assert!(topk_accuracy(&[vec![1.0]], &[0], 0).is_err());
    }

    #[test]
    fn record_validates() {
        assert!(BenchmarkRecord::new("e", 1, "m", f64::NAN, 0.0, 0).is_err());
        let r = BenchmarkRecord::new("e", 0xabcd, "m", 0.5, 1.0, 7).unwrap();
        assert_eq!(r.config_hash, "000000000000abcd");
    }
}
