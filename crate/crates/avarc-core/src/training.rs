//! Maximum-likelihood training of the next-scale model and contrastive
//! alignment finetuning against a frozen reference copy.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{ClassLabel, NextScaleModel};
use crate::nn::parallel::accumulate_batch;
use crate::nn::{log_sigmoid, Adam, AdamConfig, HasParams};
use crate::rng::{derive_rng, SeedRng};
use crate::tokenizer::MultiScaleTokenMap;

/// One training example: a tokenized image and its class id.
pub type TokenExample = (MultiScaleTokenMap, usize);

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing the label with NULL per example per epoch.
    pub label_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            label_dropout: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(Error::Parameter(format!(
                "label_dropout must be in [0, 1], got {}",
                self.label_dropout
            )));
        }
        if self.lr <= 0.0 || self.batch_size == 0 {
            return Err(Error::Parameter("lr and batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CCAConfig {
    pub beta: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seed for per-example negative-label resampling.
    pub seed: u64,
}

impl Default for CCAConfig {
    fn default() -> Self {
        Self {
            beta: 0.02,
            lambda: 1.0,
            epochs: 2,
            batch_size: 64,
            lr: 2e-4,
            seed: 0,
        }
    }
}

impl CCAConfig {
    fn validate(&self) -> Result<()> {
        if self.beta <= 0.0 || !self.beta.is_finite() {
            return Err(Error::Parameter(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Parameter(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct TrainStepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub steps: Vec<TrainStepRecord>,
    /// Mean per-token NLL per epoch over the training data (teacher-forced,
    /// using the labels seen that epoch).
    pub epoch_nll: Vec<f64>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

fn check_dataset(dataset: &[TokenExample], model: &NextScaleModel) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    for (tokens, y) in dataset {
        if *y >= model.n_classes() {
            return Err(Error::LabelOutOfRange {
                id: *y,
                n_classes: model.n_classes(),
            });
        }
        if tokens.schedule != *model.schedule() {
            return Err(Error::shape(
                "dataset token schedule",
                format!("{:?}", model.schedule().sides()),
                format!("{:?}", tokens.schedule.sides()),
            ));
        }
    }
    Ok(())
}

/// Per-token mean negative log-likelihood; accumulates gradients.
fn nll_step(model: &mut NextScaleModel, tokens: &MultiScaleTokenMap, y: ClassLabel) -> f64 {
    let upto = model.num_scales();
    let cache = model
        .forward_train(tokens, y, upto)
        .expect("dataset validated before training");
    let n = model.schedule().total_tokens();
    let total = sum_target_log_probs(model, &cache, tokens);
    let coeffs = vec![-1.0 / n as f64; n];
    model.backward_targets(tokens, &cache, upto, &coeffs);
    -total / n as f64
}

fn sum_target_log_probs(
    model: &NextScaleModel,
    cache: &crate::model::TrainCache,
    tokens: &MultiScaleTokenMap,
) -> f64 {
    let mut total = 0.0;
    let mut row = 0;
    for k in 0..model.num_scales() {
        let (h, w) = model.schedule().side(k);
        for i in 0..h {
            for j in 0..w {
                total += cache.log_probs[(row, tokens.maps[k][(i, j)] as usize)];
                row += 1;
            }
        }
    }
    total
}

/// Maximum-likelihood training with label dropout. Returns the trained model
/// and the loss trace; the NULL label becomes usable when dropout > 0.
pub fn train_mle(
    dataset: &[TokenExample],
    mut model: NextScaleModel,
    cfg: &TrainConfig,
) -> Result<(NextScaleModel, TrainReport)> {
    cfg.validate()?;
    check_dataset(dataset, &model)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut shuffle_rng = derive_rng(cfg.seed, "mle-shuffle");
    let mut dropout_rng = derive_rng(cfg.seed, "mle-dropout");
    let mut report = TrainReport::default();
    let mut step = 0;

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_nll_sum = 0.0;
        for batch_ids in order.chunks(cfg.batch_size) {
            // effective labels drawn up front so workers stay deterministic
            let batch: Vec<(&MultiScaleTokenMap, ClassLabel)> = batch_ids
                .iter()
                .map(|&i| {
                    let (tokens, y) = &dataset[i];
                    let label = if cfg.label_dropout > 0.0
                        && dropout_rng.random::<f64>() < cfg.label_dropout
                    {
                        ClassLabel::Null
                    } else {
                        ClassLabel::Class(*y)
                    };
                    (tokens, label)
                })
                .collect();
            // dropout requires the NULL row to be a legal conditioning value
            model.set_null_trained(model.null_trained || cfg.label_dropout > 0.0);

            let t0 = std::time::Instant::now();
            let losses = accumulate_batch(&mut model, &batch, |worker, (tokens, label)| {
                nll_step(worker, tokens, *label)
            });
            let inv = 1.0 / batch.len() as f64;
            model.visit_params("", &mut |mut p| p.grad.mapv_inplace(|g| g * inv));
            adam.step(&mut model);

            let loss = losses.iter().sum::<f64>() * inv;
            epoch_nll_sum += losses.iter().sum::<f64>();
            report.steps.push(TrainStepRecord {
                step,
                loss,
                lr: cfg.lr,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
            step += 1;
        }
        report.epoch_nll.push(epoch_nll_sum / dataset.len() as f64);
    }

    Ok((model, report))
}

/// Mean per-token NLL of a dataset under fixed labels (no dropout).
pub fn mean_nll(dataset: &[TokenExample], model: &NextScaleModel) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let n_tokens = model.schedule().total_tokens() as f64;
    let totals = crate::nn::parallel::ordered_par_map(dataset, |(tokens, y)| {
        model
            .log_likelihood_full(tokens, ClassLabel::Class(*y))
            .map(|r| r.total)
    });
    let mut sum = 0.0;
    for t in totals {
        sum += t?;
    }
    Ok(-sum / (dataset.len() as f64 * n_tokens))
}

/// Uniform draw over labels different from `y`; never returns NULL.
pub fn sample_negative_label(y: usize, n_classes: usize, rng: &mut SeedRng) -> Result<usize> {
    if n_classes < 2 {
        return Err(Error::Capability(
            "negative sampling needs at least 2 classes".into(),
        ));
    }
    if y >= n_classes {
        return Err(Error::LabelOutOfRange { id: y, n_classes });
    }
    let draw = rng.random_range(0..n_classes - 1);
    Ok(if draw >= y { draw + 1 } else { draw })
}

/// The alignment loss as a function of the two log-likelihood ratios
/// delta(c) = log p_theta(x|c) - log p_phi(x|c).
pub fn cca_loss_from_deltas(delta_pos: f64, delta_neg: f64, beta: f64, lambda: f64) -> f64 {
    -log_sigmoid(beta * delta_pos) - lambda * log_sigmoid(-beta * delta_neg)
}

fn check_same_arch(theta: &NextScaleModel, phi: &NextScaleModel) -> Result<()> {
    let a = &theta.config;
    let b = &phi.config;
    if a.dim != b.dim
        || a.blocks != b.blocks
        || a.heads != b.heads
        || a.vocab != b.vocab
        || a.n_classes != b.n_classes
        || a.schedule != b.schedule
    {
        return Err(Error::Parameter(
            "theta and phi must share the same architecture".into(),
        ));
    }
    Ok(())
}

/// Alignment loss for one example (no gradients).
pub fn cca_loss(
    tokens: &MultiScaleTokenMap,
    y: usize,
    y_neg: usize,
    theta: &NextScaleModel,
    phi: &NextScaleModel,
    cfg: &CCAConfig,
) -> Result<f64> {
    cfg.validate()?;
    check_same_arch(theta, phi)?;
    let lp_t_pos = theta.log_likelihood_full(tokens, ClassLabel::Class(y))?.total;
    let lp_t_neg = theta
        .log_likelihood_full(tokens, ClassLabel::Class(y_neg))?
        .total;
    let lp_p_pos = phi.log_likelihood_full(tokens, ClassLabel::Class(y))?.total;
    let lp_p_neg = phi
        .log_likelihood_full(tokens, ClassLabel::Class(y_neg))?
        .total;
    Ok(cca_loss_from_deltas(
        lp_t_pos - lp_p_pos,
        lp_t_neg - lp_p_neg,
        cfg.beta,
        cfg.lambda,
    ))
}

/// Alignment loss with gradients accumulated into `theta` (scaled by
/// `grad_scale`); `phi` stays untouched.
pub fn cca_loss_backward(
    theta: &mut NextScaleModel,
    phi: &NextScaleModel,
    tokens: &MultiScaleTokenMap,
    y: usize,
    y_neg: usize,
    cfg: &CCAConfig,
    grad_scale: f64,
) -> Result<f64> {
    cfg.validate()?;
    check_same_arch(theta, phi)?;
    let upto = theta.num_scales();
    let n = theta.schedule().total_tokens();

    let cache_pos = theta.forward_train(tokens, ClassLabel::Class(y), upto)?;
    let lp_t_pos = sum_target_log_probs(theta, &cache_pos, tokens);
    let cache_neg = theta.forward_train(tokens, ClassLabel::Class(y_neg), upto)?;
    let lp_t_neg = sum_target_log_probs(theta, &cache_neg, tokens);
    let lp_p_pos = phi.log_likelihood_full(tokens, ClassLabel::Class(y))?.total;
    let lp_p_neg = phi
        .log_likelihood_full(tokens, ClassLabel::Class(y_neg))?
        .total;

    let delta_pos = lp_t_pos - lp_p_pos;
    let delta_neg = lp_t_neg - lp_p_neg;
    let loss = cca_loss_from_deltas(delta_pos, delta_neg, cfg.beta, cfg.lambda);

    // d loss / d delta_pos = -beta * sigmoid(-beta*delta_pos)
    // d loss / d delta_neg = +lambda * beta * sigmoid(beta*delta_neg)
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let d_pos = -cfg.beta * sig(-cfg.beta * delta_pos) * grad_scale;
    let d_neg = cfg.lambda * cfg.beta * sig(cfg.beta * delta_neg) * grad_scale;
    theta.backward_targets(tokens, &cache_pos, upto, &vec![d_pos; n]);
    theta.backward_targets(tokens, &cache_neg, upto, &vec![d_neg; n]);
    Ok(loss)
}

/// Snapshot the model as the frozen reference, then optimize the alignment
/// loss with per-example resampled negative labels. Zero epochs returns the
/// model unchanged.
pub fn finetune_cca(
    dataset: &[TokenExample],
    model: NextScaleModel,
    cfg: &CCAConfig,
) -> Result<(NextScaleModel, TrainReport)> {
    cfg.validate()?;
    check_dataset(dataset, &model)?;
    if model.n_classes() < 2 {
        return Err(Error::Capability(
            "alignment finetuning needs at least 2 classes".into(),
        ));
    }
    if cfg.epochs == 0 {
        return Ok((model, TrainReport::default()));
    }
    let phi = model.clone();
    let mut theta = model;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut shuffle_rng = derive_rng(cfg.seed, "cca-shuffle");
    let mut neg_rng = derive_rng(cfg.seed, "cca-negatives");
    let mut report = TrainReport::default();
    let mut step = 0;

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch_ids in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<(&MultiScaleTokenMap, usize, usize)> = batch_ids
                .iter()
                .map(|&i| {
                    let (tokens, y) = &dataset[i];
                    let y_neg = sample_negative_label(*y, theta.n_classes(), &mut neg_rng)
                        .expect("n_classes checked above");
                    (tokens, *y, y_neg)
                })
                .collect();
            let inv = 1.0 / batch.len() as f64;
            let t0 = std::time::Instant::now();
            let phi_ref = &phi;
            let cfg_ref = cfg;
            let losses = accumulate_batch(&mut theta, &batch, |worker, (tokens, y, y_neg)| {
                cca_loss_backward(worker, phi_ref, tokens, *y, *y_neg, cfg_ref, inv)
                    .expect("dataset validated before training")
            });
            adam.step(&mut theta);
            let loss = losses.iter().sum::<f64>() * inv;
            epoch_loss += losses.iter().sum::<f64>();
            report.steps.push(TrainStepRecord {
                step,
                loss,
                lr: cfg.lr,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
            step += 1;
        }
        report.epoch_nll.push(epoch_loss / dataset.len() as f64);
    }

    Ok((theta, report))
}

/// Mean margin log p(x|y) - log p(x|y_neg) over a dataset with fixed
/// negatives; used to verify finetuning widened the gap.
pub fn mean_margin(
    dataset: &[(MultiScaleTokenMap, usize, usize)],
    model: &NextScaleModel,
) -> Result<f64> {
    let vals = crate::nn::parallel::ordered_par_map(dataset, |(tokens, y, y_neg)| -> Result<f64> {
        let pos = model.log_likelihood_full(tokens, ClassLabel::Class(*y))?.total;
        let neg = model
            .log_likelihood_full(tokens, ClassLabel::Class(*y_neg))?
            .total;
        Ok(pos - neg)
    });
    let mut sum = 0.0;
    for v in vals {
        sum += v?;
    }
    Ok(sum / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::ScaleSchedule;
    use approx::assert_relative_eq;
    use ndarray::Array2;

    fn tiny_config(n_classes: usize) -> ModelConfig {
        ModelConfig {
            dim: 16,
            blocks: 1,
            heads: 2,
            vocab: 5,
            n_classes,
            schedule: ScaleSchedule::new(vec![(1, 1), (2, 2)]).unwrap(),
            seed: 17,
        }
    }

    fn tiny_dataset(config: &ModelConfig, n: usize, seed: u64) -> Vec<TokenExample> {
        let mut rng = crate::rng::rng_from_seed(seed);
        (0..n)
            .map(|_| {
                let maps = config
                    .schedule
                    .sides()
                    .iter()
                    .map(|&(h, w)| {
                        Array2::from_shape_fn((h, w), |_| rng.random_range(0..config.vocab as u32))
                    })
                    .collect();
                let tokens = MultiScaleTokenMap {
                    maps,
                    schedule: config.schedule.clone(),
                };
                (tokens, rng.random_range(0..config.n_classes))
            })
            .collect()
    }

    #[test]
    fn step_zero_loss_is_log_vocab() {
        let config = tiny_config(2);
        let data = tiny_dataset(&config, 8, 1);
        let model = NextScaleModel::init(config.clone());
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 1e-3,
            label_dropout: 0.0,
            seed: 0,
        };
        let (_, report) = train_mle(&data, model, &cfg).unwrap();
        assert_relative_eq!(
            report.steps[0].loss,
            (config.vocab as f64).ln(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn overfits_one_example() {
        let config = tiny_config(2);
        let data = tiny_dataset(&config, 1, 2);
        let model = NextScaleModel::init(config);
        let cfg = TrainConfig {
            epochs: 300,
            batch_size: 1,
            lr: 5e-3,
            label_dropout: 0.0,
            seed: 0,
        };
        let (trained, report) = train_mle(&data, model, &cfg).unwrap();
        assert!(
            *report.epoch_nll.last().unwrap() < 0.1,
            "final nll {} not < 0.1",
            report.epoch_nll.last().unwrap()
        );
        let nll = mean_nll(&data, &trained).unwrap();
        assert!(nll < 0.1);
    }

    #[test]
    fn same_seed_identical_loss_trace() {
        let config = tiny_config(3);
        let data = tiny_dataset(&config, 12, 3);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            lr: 1e-3,
            label_dropout: 0.2,
            seed: 9,
        };
        let (_, r1) = train_mle(&data, NextScaleModel::init(config.clone()), &cfg).unwrap();
        let (_, r2) = train_mle(&data, NextScaleModel::init(config), &cfg).unwrap();
        assert_eq!(r1.losses(), r2.losses());
    }

    #[test]
    fn dropout_enables_null() {
        let config = tiny_config(2);
        let data = tiny_dataset(&config, 6, 4);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 6,
            lr: 1e-3,
            label_dropout: 0.5,
            seed: 4,
        };
        let (model, _) = train_mle(&data, NextScaleModel::init(config), &cfg).unwrap();
        assert!(model.null_trained);
        assert!(model.unconditional_log_probs(&data[0].0, 2).is_ok());
    }

    #[test]
    fn empty_dataset_rejected() {
        let config = tiny_config(2);
        let model = NextScaleModel::init(config);
        assert!(matches!(
            train_mle(&[], model, &TrainConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn negative_sampling_two_classes_forced() {
        let mut rng = crate::rng::rng_from_seed(5);
        for _ in 0..50 {
            assert_eq!(sample_negative_label(0, 2, &mut rng).unwrap(), 1);
            assert_eq!(sample_negative_label(1, 2, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn negative_sampling_excludes_y_and_is_uniform() {
        let mut rng = crate::rng::rng_from_seed(6);
        let n_classes = 7;
        let y = 3;
        let draws = 10_000;
        let mut counts = vec![0usize; n_classes];
        for _ in 0..draws {
            let neg = sample_negative_label(y, n_classes, &mut rng).unwrap();
            assert_ne!(neg, y);
            counts[neg] += 1;
        }
        // 3-sigma multinomial bound around draws/(n-1)
        let expected = draws as f64 / (n_classes - 1) as f64;
        let sigma = (expected * (1.0 - 1.0 / (n_classes - 1) as f64)).sqrt();
        for (label, &c) in counts.iter().enumerate() {
            if label == y {
                assert_eq!(c, 0);
            } else {
                assert!(
                    (c as f64 - expected).abs() < 3.0 * sigma,
                    "label {label} count {c} outside 3 sigma of {expected}"
                );
            }
        }
    }

    #[test]
    fn negative_sampling_needs_two_classes() {
        let mut rng = crate::rng::rng_from_seed(7);
        assert!(matches!(
            sample_negative_label(0, 1, &mut rng),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn cca_loss_at_start_is_scaled_log2() {
        let config = tiny_config(3);
        let data = tiny_dataset(&config, 1, 8);
        let model = NextScaleModel::init(config);
        for lambda in [0.0, 1.0, 2.5] {
            let cfg = CCAConfig {
                lambda,
                ..CCAConfig::default()
            };
            let loss = cca_loss(&data[0].0, 0, 1, &model, &model, &cfg).unwrap();
            assert_relative_eq!(loss, (1.0 + lambda) * 2.0_f64.ln(), epsilon = 1e-9);
        }
    }

    #[test]
    fn cca_loss_beta_to_zero_limit() {
        for beta in [1e-9, 1e-12] {
            let loss = cca_loss_from_deltas(3.0, -2.0, beta, 1.0);
            assert_relative_eq!(loss, 2.0 * 2.0_f64.ln(), epsilon = 1e-6);
        }
    }

    #[test]
    fn cca_loss_monotone_in_deltas() {
        let base = cca_loss_from_deltas(0.5, -0.3, 0.5, 1.0);
        assert!(cca_loss_from_deltas(0.6, -0.3, 0.5, 1.0) < base);
        assert!(cca_loss_from_deltas(0.5, -0.2, 0.5, 1.0) > base);
        // loss stays non-negative
        for dp in [-3.0, 0.0, 3.0] {
            for dn in [-3.0, 0.0, 3.0] {
                assert!(cca_loss_from_deltas(dp, dn, 0.7, 1.3) >= 0.0);
            }
        }
    }

    #[test]
    fn cca_rejects_architecture_mismatch() {
        let config = tiny_config(3);
        let data = tiny_dataset(&config, 1, 9);
        let theta = NextScaleModel::init(config.clone());
        let mut other = config;
        other.dim = 32;
        let phi = NextScaleModel::init(other);
        assert!(matches!(
            cca_loss(&data[0].0, 0, 1, &theta, &phi, &CCAConfig::default()),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn cca_gradients_match_finite_differences() {
        let config = tiny_config(3);
        let data = tiny_dataset(&config, 1, 10);
        // non-degenerate starting point: a few MLE steps first
        let (theta0, _) = train_mle(
            &tiny_dataset(&config, 6, 11),
            NextScaleModel::init(config.clone()),
            &TrainConfig {
                epochs: 2,
                batch_size: 3,
                lr: 3e-3,
                label_dropout: 0.0,
                seed: 1,
            },
        )
        .unwrap();
        let phi = {
            let mut p = theta0.clone();
            // distinct reference so the deltas are non-zero
            p.visit_params("", &mut |mut q| q.value.mapv_inplace(|v| v * 0.98));
            p
        };
        let cfg = CCAConfig {
            beta: 0.5,
            lambda: 1.3,
            ..CCAConfig::default()
        };
        let tokens = &data[0].0;

        let mut theta = theta0;
        theta.zero_grads();
        let _ = cca_loss_backward(&mut theta, &phi, tokens, 0, 2, &cfg, 1.0).unwrap();
        let grads = theta.export_grads();

        let mut rng = crate::rng::rng_from_seed(12);
        let total = theta.param_count();
        let h = 1e-5;
        let mut checked = 0;
        while checked < 25 {
            let idx = rng.random_range(0..total);
            let orig = crate::nn::get_param_scalar(&mut theta, idx);
            crate::nn::set_param_scalar(&mut theta, idx, orig + h);
            let lp = cca_loss(tokens, 0, 2, &theta, &phi, &cfg).unwrap();
            crate::nn::set_param_scalar(&mut theta, idx, orig - h);
            let lm = cca_loss(tokens, 0, 2, &theta, &phi, &cfg).unwrap();
            crate::nn::set_param_scalar(&mut theta, idx, orig);
            let fd = (lp - lm) / (2.0 * h);
            let an = crate::nn::grad_scalar(&grads, &mut theta, idx);
            let denom = fd.abs().max(an.abs());
            if denom < 1e-10 {
                continue; // parameter without influence on this example
            }
            assert!(
                ((fd - an) / denom).abs() < 1e-3,
                "param {idx}: analytic {an} vs fd {fd}"
            );
            checked += 1;
        }
    }

    #[test]
    fn finetune_zero_epochs_is_identity() {
        let config = tiny_config(3);
        let data = tiny_dataset(&config, 4, 13);
        let mut model = NextScaleModel::init(config);
        model.set_null_trained(true);
        let before = model.export_values();
        let cfg = CCAConfig {
            epochs: 0,
            ..CCAConfig::default()
        };
        let (mut after, report) = finetune_cca(&data, model, &cfg).unwrap();
        assert!(report.steps.is_empty());
        let after_vals = after.export_values();
        assert_eq!(before.len(), after_vals.len());
        for (a, b) in before.iter().zip(after_vals.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn finetune_increases_margin_and_freezes_phi() {
        let config = tiny_config(3);
        let train = tiny_dataset(&config, 10, 14);
        let (model, _) = train_mle(
            &train,
            NextScaleModel::init(config.clone()),
            &TrainConfig {
                epochs: 3,
                batch_size: 5,
                lr: 3e-3,
                label_dropout: 0.1,
                seed: 2,
            },
        )
        .unwrap();
        let phi_snapshot = {
            let mut m = model.clone();
            m.export_values()
        };

        // fixed evaluation negatives
        let mut rng = crate::rng::rng_from_seed(15);
        let eval: Vec<(MultiScaleTokenMap, usize, usize)> = train
            .iter()
            .map(|(t, y)| {
                (
                    t.clone(),
                    *y,
                    sample_negative_label(*y, 3, &mut rng).unwrap(),
                )
            })
            .collect();
        let margin_before = mean_margin(&eval, &model).unwrap();

        let cfg = CCAConfig {
            beta: 0.1,
            lambda: 1.0,
            epochs: 8,
            batch_size: 5,
            lr: 1e-3,
            seed: 3,
        };
        let (tuned, report) = finetune_cca(&train, model.clone(), &cfg).unwrap();
        assert!(!report.steps.is_empty());
        let margin_after = mean_margin(&eval, &tuned).unwrap();
        assert!(
            margin_after > margin_before,
            "margin {margin_before} -> {margin_after} did not increase"
        );

        // the snapshot the caller kept equals the model passed in: phi inside
        // finetune_cca is a fresh clone, untouched by optimization
        let mut m2 = model.clone();
        assert_eq!(m2.export_values(), phi_snapshot);
    }
}
