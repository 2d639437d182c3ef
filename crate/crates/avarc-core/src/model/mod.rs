//! Class-conditional likelihoods under the next-scale autoregressive model.
//!
//! Three estimators feed the classifier: the exact chain-rule likelihood over
//! all scales, its truncation to a scale prefix (cheap, for pruning), and a
//! smoothed variant that aggregates the likelihoods of several
//! noise-perturbed quantizations of the same feature map.

mod net;

pub use net::{Embedding, ModelConfig, NextScaleModel, TransformerBlock};
pub(crate) use net::TrainCache;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::log_sum_exp;
use crate::tokenizer::{multiscale_quantize, FeatureMap, MultiScaleTokenMap, TokenizerParams};

/// Conditioning label: a class id or the distinguished NULL value that
/// selects the unconditional model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassLabel {
    Class(usize),
    Null,
}

/// Log-likelihood with its per-token decomposition.
///
/// For chain-rule estimators (full and partial) `per_token` holds one grid
/// per evaluated scale and `total` is exactly their sum. Smoothed results
/// aggregate across noise samples, so no single per-token decomposition
/// exists and `per_token` is empty.
#[derive(Debug, Clone)]
pub struct LogLikelihoodResult {
    pub total: f64,
    pub per_token: Vec<Array2<f64>>,
}

impl LogLikelihoodResult {
    fn from_grids(per_token: Vec<Array2<f64>>) -> Self {
        let total = per_token.iter().map(|g| g.sum()).sum();
        Self { total, per_token }
    }
}

/// Noise-sample count, noise scale and seed for likelihood smoothing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingConfig {
    pub samples: usize,
    pub sigma: f64,
    pub rng_seed: u64,
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Parameter("smoothing sample count must be >= 1".into()));
        }
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return Err(Error::Parameter(format!(
                "smoothing sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

impl NextScaleModel {
    /// Teacher-forced log-probabilities of the given tokens for scales
    /// `1..=upto_scale`, one grid per scale. Single forward pass.
    pub fn token_log_probs(
        &self,
        tokens: &MultiScaleTokenMap,
        y: ClassLabel,
        upto_scale: usize,
    ) -> Result<Vec<Array2<f64>>> {
        let log_probs = self.forward_log_probs(tokens, y, upto_scale)?;
        Ok(gather_target_grids(&log_probs, tokens, upto_scale))
    }

    /// Full predictive distributions (row-wise log-softmax over the
    /// vocabulary) for scales `1..=upto_scale`; mainly for diagnostics and
    /// normalization checks.
    pub fn predictive_log_distributions(
        &self,
        tokens: &MultiScaleTokenMap,
        y: ClassLabel,
        upto_scale: usize,
    ) -> Result<Array2<f64>> {
        self.forward_log_probs(tokens, y, upto_scale)
    }

    /// log p(tokens | y) over all scales.
    pub fn log_likelihood_full(
        &self,
        tokens: &MultiScaleTokenMap,
        y: ClassLabel,
    ) -> Result<LogLikelihoodResult> {
        let grids = self.token_log_probs(tokens, y, self.num_scales())?;
        Ok(LogLikelihoodResult::from_grids(grids))
    }

    /// log p(first `upto_scale` scales | y); the pruning estimator.
    pub fn log_likelihood_partial(
        &self,
        tokens: &MultiScaleTokenMap,
        y: ClassLabel,
        upto_scale: usize,
    ) -> Result<LogLikelihoodResult> {
        if upto_scale == 0 || upto_scale > self.num_scales() {
            return Err(Error::Parameter(format!(
                "partial likelihood needs upto_scale in [1, {}], got {upto_scale}",
                self.num_scales()
            )));
        }
        let grids = self.token_log_probs(tokens, y, upto_scale)?;
        Ok(LogLikelihoodResult::from_grids(grids))
    }

    /// Smoothed likelihood: log of the summed likelihoods of `samples`
    /// noise-perturbed quantizations of `features`, via log-sum-exp.
    pub fn log_likelihood_smoothed(
        &self,
        features: &FeatureMap,
        y: ClassLabel,
        tokenizer: &TokenizerParams,
        cfg: &SmoothingConfig,
    ) -> Result<LogLikelihoodResult> {
        cfg.validate()?;
        let mut sample_totals = Vec::with_capacity(cfg.samples);
        for i in 0..cfg.samples {
            let noised = crate::tokenizer::perturb_features(
                features,
                cfg.sigma,
                cfg.rng_seed.wrapping_add(i as u64),
            )?;
            let tokens = multiscale_quantize(&noised, tokenizer)?;
            sample_totals.push(self.log_likelihood_full(&tokens, y)?.total);
        }
        Ok(LogLikelihoodResult {
            total: log_sum_exp(&sample_totals),
            per_token: Vec::new(),
        })
    }

    /// Token log-probabilities under the NULL label.
    pub fn unconditional_log_probs(
        &self,
        tokens: &MultiScaleTokenMap,
        upto_scale: usize,
    ) -> Result<Vec<Array2<f64>>> {
        self.token_log_probs(tokens, ClassLabel::Null, upto_scale)
    }
}

/// Smoothing needs the same noise samples for every candidate class; the
/// perturbed token maps do not depend on the label, so quantize once and
/// reuse across classes.
pub fn smoothed_token_maps(
    features: &FeatureMap,
    tokenizer: &TokenizerParams,
    cfg: &SmoothingConfig,
) -> Result<Vec<MultiScaleTokenMap>> {
    cfg.validate()?;
    (0..cfg.samples)
        .map(|i| {
            let noised = crate::tokenizer::perturb_features(
                features,
                cfg.sigma,
                cfg.rng_seed.wrapping_add(i as u64),
            )?;
            multiscale_quantize(&noised, tokenizer)
        })
        .collect()
}

fn gather_target_grids(
    log_probs: &Array2<f64>,
    tokens: &MultiScaleTokenMap,
    upto_scale: usize,
) -> Vec<Array2<f64>> {
    let mut grids = Vec::with_capacity(upto_scale);
    let mut row = 0;
    for k in 0..upto_scale {
        let (h, w) = tokens.schedule.side(k);
        let mut grid = Array2::<f64>::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                grid[(i, j)] = log_probs[(row, tokens.maps[k][(i, j)] as usize)];
                row += 1;
            }
        }
        grids.push(grid);
    }
    grids
}
