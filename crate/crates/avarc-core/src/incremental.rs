//! Class-incremental learning: independent per-task generative models merged
//! at the likelihood level, and a no-rehearsal discriminative baseline that
//! exhibits the forgetting the merge avoids.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{smoothed_token_maps, ClassLabel, ModelConfig, NextScaleModel, SmoothingConfig};
use crate::nn::parallel::{accumulate_batch, ordered_par_map};
use crate::nn::{scoped, Adam, AdamConfig, Conv2d, HasParams, Linear, ParamMut};
use crate::rng::derive_rng;
use crate::tokenizer::{encode, multiscale_quantize, Image, TokenizerParams};
use crate::training::{finetune_cca, train_mle, CCAConfig, TokenExample, TrainConfig};

/// Ordered, disjoint label sets covering `0..n_classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub tasks: Vec<Vec<usize>>,
}

impl TaskSplit {
    pub fn new(tasks: Vec<Vec<usize>>, n_classes: usize) -> Result<Self> {
        if tasks.is_empty() || tasks.iter().any(|t| t.is_empty()) {
            return Err(Error::Parameter("tasks must be non-empty".into()));
        }
        let mut seen = BTreeSet::new();
        for t in &tasks {
            for &label in t {
                if label >= n_classes {
                    return Err(Error::LabelOutOfRange {
                        id: label,
                        n_classes,
                    });
                }
                if !seen.insert(label) {
                    return Err(Error::Parameter(format!(
                        "label {label} appears in more than one task"
                    )));
                }
            }
        }
        if seen.len() != n_classes {
            return Err(Error::Parameter(format!(
                "tasks cover {} labels but the dataset has {n_classes}",
                seen.len()
            )));
        }
        Ok(Self { tasks })
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// The 0-4 / 5-9 digit split.
    pub fn first_five_last_five() -> Self {
        Self::new(vec![(0..5).collect(), (5..10).collect()], 10).unwrap()
    }
}

/// Labels each per-task trainer actually saw; lets tests assert isolation.
#[derive(Debug, Clone, Default)]
pub struct TaskTrainReport {
    pub observed_labels: Vec<BTreeSet<usize>>,
}

/// Train one generative model per task on that task's examples only
/// (maximum likelihood, then alignment finetuning when configured). Each
/// model uses a local label space in task order.
pub fn train_task_models(
    dataset: &[TokenExample],
    split: &TaskSplit,
    base_config: &ModelConfig,
    train_cfg: &TrainConfig,
    cca_cfg: &CCAConfig,
) -> Result<(Vec<NextScaleModel>, TaskTrainReport)> {
    let mut models = Vec::with_capacity(split.n_tasks());
    let mut report = TaskTrainReport::default();
    for (t, task) in split.tasks.iter().enumerate() {
        let local_of = |global: usize| task.iter().position(|&g| g == global);
        let mut observed = BTreeSet::new();
        let task_data: Vec<TokenExample> = dataset
            .iter()
            .filter_map(|(tokens, y)| {
                local_of(*y).map(|local| {
                    observed.insert(*y);
                    (tokens.clone(), local)
                })
            })
            .collect();
        if task_data.is_empty() {
            return Err(Error::Data(format!("task {t} has no training examples")));
        }
        let config = ModelConfig {
            n_classes: task.len(),
            seed: base_config.seed.wrapping_add(t as u64),
            ..base_config.clone()
        };
        let model = NextScaleModel::init(config);
        let cfg_t = TrainConfig {
            seed: train_cfg.seed.wrapping_add(t as u64),
            ..train_cfg.clone()
        };
        let (model, _) = train_mle(&task_data, model, &cfg_t)?;
        let model = if cca_cfg.epochs > 0 && task.len() >= 2 {
            let cca_t = CCAConfig {
                seed: cca_cfg.seed.wrapping_add(t as u64),
                ..cca_cfg.clone()
            };
            finetune_cca(&task_data, model, &cca_t)?.0
        } else {
            model
        };
        models.push(model);
        report.observed_labels.push(observed);
    }
    Ok((models, report))
}

/// A union of per-task models: every global label resolves to one model and
/// a local label inside it. Per-model additive score offsets default to 0
/// (raw likelihoods are compared directly).
#[derive(Debug)]
pub struct MergedClassifier {
    pub models: Vec<NextScaleModel>,
    /// (global label, model index, local label), sorted by global label.
    pub entries: Vec<(usize, usize, usize)>,
    pub offsets: Vec<f64>,
}

impl MergedClassifier {
    pub fn new(models: Vec<NextScaleModel>, split: &TaskSplit) -> Result<Self> {
        if models.len() != split.n_tasks() {
            return Err(Error::Parameter(format!(
                "{} models for {} tasks",
                models.len(),
                split.n_tasks()
            )));
        }
        let first = &models[0].config;
        for m in &models {
            if m.config.schedule != first.schedule || m.config.vocab != first.vocab {
                return Err(Error::Incompatible(
                    "merged models must share schedule and vocabulary".into(),
                ));
            }
        }
        for (t, task) in split.tasks.iter().enumerate() {
            if models[t].n_classes() != task.len() {
                return Err(Error::Incompatible(format!(
                    "model {t} has {} classes but task has {}",
                    models[t].n_classes(),
                    task.len()
                )));
            }
        }
        let mut entries = Vec::new();
        for (t, task) in split.tasks.iter().enumerate() {
            for (local, &global) in task.iter().enumerate() {
                entries.push((global, t, local));
            }
        }
        entries.sort_unstable();
        let offsets = vec![0.0; models.len()];
        Ok(Self {
            models,
            entries,
            offsets,
        })
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }
}

/// Likelihood-level merge: score every global label through its owning model
/// and take the argmax (uniform prior, smallest label on ties).
pub fn merged_classify(
    image: &Image,
    merged: &MergedClassifier,
    tokenizer: &TokenizerParams,
    method: crate::classifier::LikelihoodMethod,
    seed: u64,
) -> Result<(usize, Vec<(usize, f64)>)> {
    use crate::classifier::LikelihoodMethod as M;
    let features = encode(image, tokenizer)?;
    let tokens = multiscale_quantize(&features, tokenizer)?;
    let smoothed_maps = match method {
        M::Smoothed { samples, sigma } => Some(smoothed_token_maps(
            &features,
            tokenizer,
            &SmoothingConfig {
                samples,
                sigma,
                rng_seed: seed,
            },
        )?),
        _ => None,
    };

    let scores = ordered_par_map(&merged.entries, |&(global, t, local)| -> Result<(usize, f64)> {
        let model = &merged.models[t];
        let y = ClassLabel::Class(local);
        let score = match method {
            M::Full => model.log_likelihood_full(&tokens, y)?.total,
            M::Partial { upto_scale } => {
                let upto = upto_scale.min(model.num_scales());
                model.log_likelihood_partial(&tokens, y, upto)?.total
            }
            M::Smoothed { .. } => {
                let maps = smoothed_maps.as_ref().unwrap();
                let totals: Result<Vec<f64>> = maps
                    .iter()
                    .map(|m| Ok(model.log_likelihood_full(m, y)?.total))
                    .collect();
                crate::nn::log_sum_exp(&totals?)
            }
        };
        Ok((global, score + merged.offsets[t]))
    });
    let mut scored = Vec::with_capacity(merged.entries.len());
    for s in scores {
        scored.push(s?);
    }
    let mut best = scored[0];
    for &(label, score) in &scored[1..] {
        if score > best.1 || (score == best.1 && label < best.0) {
            best = (label, score);
        }
    }
    Ok((best.0, scored))
}

/// Small discriminative CNN with a full-width softmax head.
#[derive(Debug, Clone)]
pub struct BaselineClassifier {
    c1: Conv2d,
    c2: Conv2d,
    fc1: Linear,
    fc2: Linear,
    pub n_classes: usize,
}

impl BaselineClassifier {
    pub fn init(img_hw: (usize, usize), n_classes: usize, seed: u64) -> Self {
        let mut rng = derive_rng(seed, "baseline-init");
        let c1 = Conv2d::new(&mut rng, 1, 8, 2);
        let c2 = Conv2d::new(&mut rng, 8, 16, 2);
        let (h4, w4) = (img_hw.0.div_ceil(4), img_hw.1.div_ceil(4));
        Self {
            c1,
            c2,
            fc1: Linear::new(&mut rng, 16 * h4 * w4, 64),
            fc2: Linear::new(&mut rng, 64, n_classes),
            n_classes,
        }
    }

    fn logits(&self, image: &Image) -> Vec<f64> {
        use crate::nn::gelu;
        let a1 = self.c1.forward(image.pixels()).mapv(gelu);
        let a2 = self.c2.forward(a1.view()).mapv(gelu);
        let flat = a2
            .into_shape_with_order((1, self.fc1.w.nrows()))
            .expect("baseline flatten");
        let h = self.fc1.forward(flat.view()).mapv(gelu);
        self.fc2.forward(h.view()).row(0).to_vec()
    }

    pub fn classify(&self, image: &Image) -> usize {
        let logits = self.logits(image);
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        best
    }

    /// Cross-entropy forward/backward for one example.
    fn train_step(&mut self, image: &Image, y: usize) -> f64 {
        use crate::nn::{gelu, gelu_grad};
        let x = image.pixels();
        let a1 = self.c1.forward(x);
        let h1 = a1.mapv(gelu);
        let a2 = self.c2.forward(h1.view());
        let h2 = a2.mapv(gelu);
        let dims2 = h2.dim();
        let flat = h2
            .view()
            .into_shape_with_order((1, self.fc1.w.nrows()))
            .expect("baseline flatten");
        let a3 = self.fc1.forward(flat);
        let h3 = a3.mapv(gelu);
        let logits = self.fc2.forward(h3.view());

        let row = logits.row(0);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - row[y];
        let mut dlogits = ndarray::Array2::zeros(logits.raw_dim());
        for (i, v) in row.iter().enumerate() {
            dlogits[(0, i)] = (v - lse).exp() - ((i == y) as u64 as f64);
        }

        let dh3 = self.fc2.backward(h3.view(), dlogits.view());
        let da3 = &dh3 * &a3.mapv(gelu_grad);
        let dflat = self.fc1.backward(flat, da3.view());
        let dh2 = dflat
            .into_shape_with_order(dims2)
            .expect("baseline unflatten");
        let da2 = &dh2 * &a2.mapv(gelu_grad);
        let dh1 = self.c2.backward(h1.view(), &da2);
        let da1 = &dh1 * &a1.mapv(gelu_grad);
        let _ = self.c1.backward(x, &da1);
        loss
    }
}

impl HasParams for BaselineClassifier {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.c1.visit_params(&scoped(prefix, "c1"), f);
        self.c2.visit_params(&scoped(prefix, "c2"), f);
        self.fc1.visit_params(&scoped(prefix, "fc1"), f);
        self.fc2.visit_params(&scoped(prefix, "fc2"), f);
    }
}

#[derive(Debug, Clone)]
pub struct BaselineTrainConfig {
    pub epochs_per_phase: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BaselineTrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_phase: 6,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Train the discriminative baseline phase by phase in task order, with no
/// rehearsal of earlier tasks.
pub fn train_baseline_sequential(
    dataset: &[(Image, usize)],
    split: &TaskSplit,
    cfg: &BaselineTrainConfig,
) -> Result<BaselineClassifier> {
    if dataset.is_empty() {
        return Err(Error::Data("baseline training dataset is empty".into()));
    }
    let n_classes: usize = split.tasks.iter().map(|t| t.len()).sum();
    let (_, h, w) = dataset[0].0.dims();
    let mut clf = BaselineClassifier::init((h, w), n_classes, cfg.seed);
    let mut shuffle_rng = derive_rng(cfg.seed, "baseline-shuffle");

    for task in &split.tasks {
        let phase: Vec<&(Image, usize)> = dataset
            .iter()
            .filter(|(_, y)| task.contains(y))
            .collect();
        if phase.is_empty() {
            return Err(Error::Data("a task phase has no training examples".into()));
        }
        let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
        for _epoch in 0..cfg.epochs_per_phase {
            let mut order: Vec<usize> = (0..phase.len()).collect();
            order.shuffle(&mut shuffle_rng);
            for batch_ids in order.chunks(cfg.batch_size) {
                let batch: Vec<&(Image, usize)> =
                    batch_ids.iter().map(|&i| phase[i]).collect();
                let _ = accumulate_batch(&mut clf, &batch, |worker, (img, y)| {
                    worker.train_step(img, *y)
                });
                let inv = 1.0 / batch.len() as f64;
                clf.visit_params("", &mut |mut p| p.grad.mapv_inplace(|g| g * inv));
                adam.step(&mut clf);
            }
        }
    }
    Ok(clf)
}

#[derive(Debug, Clone, Serialize)]
pub struct IncrementalResult {
    pub per_task: Vec<f64>,
    pub average: f64,
}

/// Per-task top-1 accuracy and the unweighted average.
pub fn evaluate_incremental<F>(predict: F, test_sets: &[Vec<(Image, usize)>]) -> Result<IncrementalResult>
where
    F: Fn(&Image) -> Result<usize>,
{
    if test_sets.is_empty() {
        return Err(Error::Parameter("no test sets given".into()));
    }
    let mut per_task = Vec::with_capacity(test_sets.len());
    for set in test_sets {
        if set.is_empty() {
            return Err(Error::Data("empty test set".into()));
        }
        let mut hits = 0usize;
        for (img, y) in set {
            if predict(img)? == *y {
                hits += 1;
            }
        }
        per_task.push(hits as f64 / set.len() as f64);
    }
    let average = per_task.iter().sum::<f64>() / per_task.len() as f64;
    Ok(IncrementalResult { per_task, average })
}

/// Deterministic blob image used by tests.
#[cfg(test)]
fn test_image(cx: f64, cy: f64) -> Image {
    Image::new(ndarray::Array3::from_shape_fn((1, 28, 28), |(_, y, x)| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        (-(dy * dy + dx * dx) / 30.0).exp()
    }))
    .unwrap()
}
