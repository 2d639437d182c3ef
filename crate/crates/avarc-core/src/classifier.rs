//! Bayes-rule classification over class-conditional likelihoods, exhaustive
//! or staged. A stage plan scores the surviving candidates with its own
//! likelihood method, keeps the top `keep`, and hands them to the next stage;
//! scores are never mixed across stages.

use std::time::Instant;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{smoothed_token_maps, ClassLabel, NextScaleModel, SmoothingConfig};
use crate::nn::parallel::ordered_par_map;
use crate::tokenizer::{
    encode, multiscale_quantize, FeatureMap, Image, MultiScaleTokenMap, TokenizerParams,
};

/// Per-class prior probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior(Vec<f64>);

impl Prior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Parameter("prior must be non-empty".into()));
        }
        if probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::Parameter(
                "prior entries must be finite and >= 0".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!(
                "prior must sum to 1 within 1e-9, got {sum}"
            )));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Posterior p(y|x) from per-class log-likelihoods and a prior.
pub fn posterior(log_liks: &[f64], prior: &Prior) -> Result<Vec<f64>> {
    if log_liks.len() != prior.len() {
        return Err(Error::shape("posterior inputs", prior.len(), log_liks.len()));
    }
    let z: Vec<f64> = log_liks
        .iter()
        .zip(prior.probs())
        .map(|(&ll, &p)| {
            if p == 0.0 {
                f64::NEG_INFINITY
            } else {
                ll + p.ln()
            }
        })
        .collect();
    if z.iter().any(|v| v.is_nan()) {
        return Err(Error::Parameter(
            "log-likelihoods must not be NaN on the prior's support".into(),
        ));
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::Degenerate(
            "all classes have zero posterior mass".into(),
        ));
    }
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let denom: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / denom).collect())
}

/// Likelihood estimator used by a stage or by exhaustive classification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LikelihoodMethod {
    /// Chain-rule likelihood truncated to the first `upto_scale` scales.
    Partial { upto_scale: usize },
    /// Chain-rule likelihood over all scales.
    Full,
    /// Log-sum of likelihoods across noise-perturbed quantizations.
    Smoothed { samples: usize, sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub keep: usize,
    pub method: LikelihoodMethod,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    stages: Vec<Stage>,
}

impl StagePlan {
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Parameter("stage plan must be non-empty".into()));
        }
        for s in &stages {
            if s.keep == 0 {
                return Err(Error::Parameter("stage keep counts must be >= 1".into()));
            }
            if let LikelihoodMethod::Partial { upto_scale } = s.method {
                if upto_scale == 0 {
                    return Err(Error::Parameter(
                        "partial stage needs upto_scale >= 1".into(),
                    ));
                }
            }
            if let LikelihoodMethod::Smoothed { samples, sigma } = s.method {
                SmoothingConfig {
                    samples,
                    sigma,
                    rng_seed: 0,
                }
                .validate()?;
            }
        }
        for w in stages.windows(2) {
            if w[1].keep > w[0].keep {
                return Err(Error::Parameter(
                    "stage keep counts must be non-increasing".into(),
                ));
            }
        }
        if stages.last().unwrap().keep != 1 {
            return Err(Error::Parameter("final stage must keep exactly 1".into()));
        }
        Ok(Self { stages })
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Single full-likelihood stage; equivalent to exhaustive classification.
    pub fn single_full() -> Self {
        Self::new(vec![Stage {
            keep: 1,
            method: LikelihoodMethod::Full,
        }])
        .unwrap()
    }
}

/// The three-stage schedule used at reference scale: partial-scale pruning to
/// 10 candidates, full likelihood to 3, smoothed likelihood for the winner.
/// Keep counts clamp to the label-set size; tiny label sets degenerate to a
/// single full-likelihood stage.
pub fn default_plan(n_classes: usize) -> StagePlan {
    if n_classes <= 3 {
        return StagePlan::single_full();
    }
    StagePlan::new(vec![
        Stage {
            keep: 10.min(n_classes),
            method: LikelihoodMethod::Partial { upto_scale: 6 },
        },
        Stage {
            keep: 3,
            method: LikelihoodMethod::Full,
        },
        Stage {
            keep: 1,
            method: LikelihoodMethod::Smoothed {
                samples: 3,
                sigma: 0.1,
            },
        },
    ])
    .unwrap()
}

/// Scores and pruning decisions of one stage.
#[derive(Debug, Clone, Serialize)]
pub struct StageTrace {
    pub candidates: Vec<usize>,
    /// Log-domain scores, parallel to `candidates`.
    pub scores: Vec<f64>,
    pub kept: Vec<usize>,
    pub millis: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassificationTrace {
    pub stages: Vec<StageTrace>,
    pub prediction: usize,
}

impl ClassificationTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

/// Tokenized view of one image, shared by all stages.
struct Prepared {
    features: FeatureMap,
    tokens: MultiScaleTokenMap,
}

fn prepare(image: &Image, tokenizer: &TokenizerParams) -> Result<Prepared> {
    let features = encode(image, tokenizer)?;
    let tokens = multiscale_quantize(&features, tokenizer)?;
    Ok(Prepared { features, tokens })
}

fn score_with_method(
    prepared: &Prepared,
    labels: &[usize],
    model: &NextScaleModel,
    tokenizer: &TokenizerParams,
    method: LikelihoodMethod,
    seed: u64,
) -> Result<Vec<f64>> {
    match method {
        LikelihoodMethod::Full => ordered_par_map(labels, |&y| {
            model
                .log_likelihood_full(&prepared.tokens, ClassLabel::Class(y))
                .map(|r| r.total)
        })
        .into_iter()
        .collect(),
        LikelihoodMethod::Partial { upto_scale } => {
            // plans written for deeper schedules clamp to this model's depth
            let upto = upto_scale.min(model.num_scales());
            ordered_par_map(labels, |&y| {
                model
                    .log_likelihood_partial(&prepared.tokens, ClassLabel::Class(y), upto)
                    .map(|r| r.total)
            })
            .into_iter()
            .collect()
        }
        LikelihoodMethod::Smoothed { samples, sigma } => {
            // the noise draws do not depend on the label: quantize once,
            // reuse the token maps for every candidate
            let cfg = SmoothingConfig {
                samples,
                sigma,
                rng_seed: seed,
            };
            let maps = smoothed_token_maps(&prepared.features, tokenizer, &cfg)?;
            ordered_par_map(labels, |&y| -> Result<f64> {
                let mut totals = Vec::with_capacity(maps.len());
                for m in &maps {
                    totals.push(model.log_likelihood_full(m, ClassLabel::Class(y))?.total);
                }
                Ok(crate::nn::log_sum_exp(&totals))
            })
            .into_iter()
            .collect()
        }
    }
}

/// Indices sorted by descending score, ties broken by ascending label.
fn rank(labels: &[usize], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(labels[a].cmp(&labels[b]))
    });
    order
}

/// Argmax of the given method over every candidate label (uniform prior,
/// smallest label wins ties).
pub fn classify_exhaustive(
    image: &Image,
    labels: &[usize],
    model: &NextScaleModel,
    tokenizer: &TokenizerParams,
    method: LikelihoodMethod,
    seed: u64,
) -> Result<(usize, ClassificationTrace)> {
    if labels.is_empty() {
        return Err(Error::Parameter("label set must be non-empty".into()));
    }
    let prepared = prepare(image, tokenizer)?;
    let start = Instant::now();
    let scores = score_with_method(&prepared, labels, model, tokenizer, method, seed)?;
    let order = rank(labels, &scores);
    let prediction = labels[order[0]];
    let trace = ClassificationTrace {
        stages: vec![StageTrace {
            candidates: labels.to_vec(),
            scores,
            kept: vec![prediction],
            millis: start.elapsed().as_secs_f64() * 1e3,
        }],
        prediction,
    };
    Ok((prediction, trace))
}

/// Staged classification: each stage re-scores the surviving candidates with
/// its own method and keeps its top `keep` (clamped to the pool size).
pub fn classify_adaptive(
    image: &Image,
    labels: &[usize],
    model: &NextScaleModel,
    tokenizer: &TokenizerParams,
    plan: &StagePlan,
    seed: u64,
) -> Result<(usize, ClassificationTrace)> {
    if labels.is_empty() {
        return Err(Error::Parameter("label set must be non-empty".into()));
    }
    let prepared = prepare(image, tokenizer)?;
    let mut candidates: Vec<usize> = labels.to_vec();
    let mut stages = Vec::with_capacity(plan.stages().len());
    let mut prediction = candidates[0];

    for stage in plan.stages() {
        let start = Instant::now();
        let scores =
            score_with_method(&prepared, &candidates, model, tokenizer, stage.method, seed)?;
        let order = rank(&candidates, &scores);
        let keep = stage.keep.min(candidates.len());
        let kept: Vec<usize> = order[..keep].iter().map(|&i| candidates[i]).collect();
        prediction = candidates[order[0]];
        stages.push(StageTrace {
            candidates: candidates.clone(),
            scores,
            kept: kept.clone(),
            millis: start.elapsed().as_secs_f64() * 1e3,
        });
        candidates = kept;
    }

    Ok((prediction, ClassificationTrace { stages, prediction }))
}

// --- plan (de)serialization: [{keep, method, params}, ...] ---

#[derive(Serialize, Deserialize)]
struct StageRepr {
    keep: usize,
    method: String,
    #[serde(default)]
    params: serde_json::Map<String, serde_json::Value>,
}

impl Serialize for Stage {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut params = serde_json::Map::new();
        let method = match self.method {
            LikelihoodMethod::Full => "full",
            LikelihoodMethod::Partial { upto_scale } => {
                params.insert("upto_scale".into(), upto_scale.into());
                "partial"
            }
            LikelihoodMethod::Smoothed { samples, sigma } => {
                params.insert("samples".into(), samples.into());
                params.insert("sigma".into(), sigma.into());
                "smoothed"
            }
        };
        StageRepr {
            keep: self.keep,
            method: method.into(),
            params,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Stage {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = StageRepr::deserialize(deserializer)?;
        let get_usize = |key: &str| -> std::result::Result<usize, D::Error> {
            repr.params
                .get(key)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| D::Error::custom(format!("missing integer param '{key}'")))
        };
        let method = match repr.method.as_str() {
            "full" => LikelihoodMethod::Full,
            "partial" => LikelihoodMethod::Partial {
                upto_scale: get_usize("upto_scale")?,
            },
            "smoothed" => LikelihoodMethod::Smoothed {
                samples: get_usize("samples")?,
                sigma: repr
                    .params
                    .get("sigma")
                    .and_then(|v| v.as_f64())
                    .ok_or_else(|| D::Error::custom("missing float param 'sigma'"))?,
            },
            other => return Err(D::Error::custom(format!("unknown method '{other}'"))),
        };
        Ok(Stage {
            keep: repr.keep,
            method,
        })
    }
}

impl Serialize for StagePlan {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.stages.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for StagePlan {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let stages = Vec::<Stage>::deserialize(deserializer)?;
        StagePlan::new(stages).map_err(D::Error::custom)
    }
}
