//! Token-level explanations: the log-ratio between conditional and
//! unconditional next-token probabilities, per token, rendered as pixel-space
//! heatmaps. Positive values mark tokens the label makes more likely.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ClassLabel, NextScaleModel};
use crate::nn::resample::bilinear_resize;
use crate::tokenizer::{Image, MultiScaleTokenMap};

/// Per-scale grids of token-wise log-ratios for one label.
#[derive(Debug, Clone)]
pub struct PMIMap {
    pub grids: Vec<Array2<f64>>,
    pub label: ClassLabel,
}

impl PMIMap {
    /// Sum over all tokens; telescopes to a likelihood difference.
    pub fn total(&self) -> f64 {
        self.grids.iter().map(|g| g.sum()).sum()
    }
}

/// Rendered explanation with display-normalization metadata.
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub values: Array2<f64>,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapMode {
    /// Upsample only the finest-scale grid.
    FinestScale,
    /// Upsample every scale and average.
    ScaleWeightedSum,
}

impl std::str::FromStr for HeatmapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finest_scale" => Ok(HeatmapMode::FinestScale),
            "scale_weighted_sum" => Ok(HeatmapMode::ScaleWeightedSum),
            other => Err(Error::Parameter(format!(
                "unknown heatmap mode '{other}' (expected finest_scale or scale_weighted_sum)"
            ))),
        }
    }
}

/// Token-wise pointwise mutual information between the tokens and `y`:
/// log p(token | context, y) - log p(token | context). Exactly two model
/// forward passes.
pub fn token_pmi(
    tokens: &MultiScaleTokenMap,
    y: ClassLabel,
    model: &NextScaleModel,
) -> Result<PMIMap> {
    let upto = model.num_scales();
    let cond = model.token_log_probs(tokens, y, upto)?;
    let uncond = model.unconditional_log_probs(tokens, upto)?;
    let grids = cond
        .into_iter()
        .zip(uncond)
        .map(|(c, u)| c - u)
        .collect();
    Ok(PMIMap { grids, label: y })
}

/// Why `y_a` rather than `y_b`: the unconditional terms cancel, leaving the
/// conditional log-ratio. No unconditional pass needed.
pub fn contrastive_pmi(
    tokens: &MultiScaleTokenMap,
    y_a: ClassLabel,
    y_b: ClassLabel,
    model: &NextScaleModel,
) -> Result<PMIMap> {
    if y_a == y_b {
        return Err(Error::Parameter(
            "contrastive explanation needs two distinct labels".into(),
        ));
    }
    let upto = model.num_scales();
    let a = model.token_log_probs(tokens, y_a, upto)?;
    let b = model.token_log_probs(tokens, y_b, upto)?;
    let grids = a.into_iter().zip(b).map(|(x, y)| x - y).collect();
    Ok(PMIMap { grids, label: y_a })
}

/// Upsample a PMI map to pixel space.
pub fn render_heatmap(pmi: &PMIMap, target_hw: (usize, usize), mode: HeatmapMode) -> Result<Heatmap> {
    if pmi.grids.is_empty() {
        return Err(Error::Parameter("PMI map has no scales".into()));
    }
    let (th, tw) = target_hw;
    if th == 0 || tw == 0 {
        return Err(Error::Parameter("heatmap target dims must be positive".into()));
    }
    let upsample = |g: &Array2<f64>| -> Array2<f64> {
        let (h, w) = g.dim();
        let as3 = g
            .view()
            .into_shape_with_order((h, w, 1))
            .expect("grid reshape");
        let up = bilinear_resize(as3, th, tw);
        up.index_axis_move(ndarray::Axis(2), 0)
    };
    let values = match mode {
        HeatmapMode::FinestScale => upsample(pmi.grids.last().unwrap()),
        HeatmapMode::ScaleWeightedSum => {
            let mut acc = Array2::<f64>::zeros((th, tw));
            for g in &pmi.grids {
                acc += &upsample(g);
            }
            acc / pmi.grids.len() as f64
        }
    };
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(Heatmap { values, min, max })
}

/// Sidecar payload stored next to rendered heatmaps.
#[derive(Debug, Serialize)]
pub struct PMISidecar {
    pub label: String,
    pub total: f64,
    pub min: f64,
    pub max: f64,
    pub grids: Vec<Vec<Vec<f64>>>,
}

pub fn sidecar(pmi: &PMIMap, heatmap: &Heatmap) -> PMISidecar {
    PMISidecar {
        label: match pmi.label {
            ClassLabel::Class(i) => i.to_string(),
            ClassLabel::Null => "null".into(),
        },
        total: pmi.total(),
        min: heatmap.min,
        max: heatmap.max,
        grids: pmi
            .grids
            .iter()
            .map(|g| g.rows().into_iter().map(|r| r.to_vec()).collect())
            .collect(),
    }
}

/// Signed colormap: negative values blue, positive red, zero white.
fn diverging_rgb(v: f64, scale: f64) -> [u8; 3] {
    let t = if scale > 0.0 { (v / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let lerp = |a: f64, b: f64, f: f64| (a + (b - a) * f) as u8;
    if t >= 0.0 {
        [255, lerp(255.0, 40.0, t), lerp(255.0, 40.0, t)]
    } else {
        [lerp(255.0, 40.0, -t), lerp(255.0, 40.0, -t), 255]
    }
}

/// Render as a PNG; when `overlay` is given, blends the colormap over the
/// grayscale image.
pub fn heatmap_png(heatmap: &Heatmap, overlay: Option<&Image>) -> image::RgbImage {
    let (h, w) = heatmap.values.dim();
    let scale = heatmap.max.abs().max(heatmap.min.abs());
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let rgb = diverging_rgb(heatmap.values[(y, x)], scale);
            let px = if let Some(base) = overlay {
                let pixels = base.pixels();
                let (c, bh, bw) = base.dims();
                let gray = if y < bh && x < bw {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += pixels[(ch, y, x)];
                    }
                    (acc / c as f64 * 255.0) as u8
                } else {
                    0
                };
                [
                    ((gray as u16 + rgb[0] as u16) / 2) as u8,
                    ((gray as u16 + rgb[1] as u16) / 2) as u8,
                    ((gray as u16 + rgb[2] as u16) / 2) as u8,
                ]
            } else {
                rgb
            };
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}

pub fn save_heatmap_png(
    heatmap: &Heatmap,
    overlay: Option<&Image>,
    path: &std::path::Path,
) -> Result<()> {
    heatmap_png(heatmap, overlay)
        .save(path)
        .map_err(|e| Error::Format(format!("failed to write heatmap png: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::nn::HasParams;
    use crate::tokenizer::ScaleSchedule;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn test_model() -> (NextScaleModel, MultiScaleTokenMap) {
        let config = ModelConfig {
            dim: 16,
            blocks: 2,
            heads: 2,
            vocab: 6,
            n_classes: 3,
            schedule: ScaleSchedule::new(vec![(1, 1), (2, 2), (3, 3)]).unwrap(),
            seed: 31,
        };
        let mut model = NextScaleModel::init(config.clone());
        let mut rng = crate::rng::rng_from_seed(32);
        model.visit_params("", &mut |mut p| {
            if p.name.starts_with("head") {
                p.value.mapv_inplace(|_| rng.random::<f64>() - 0.5);
            }
        });
        model.set_null_trained(true);
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
        (model, tokens)
    }

    #[test]
    fn telescoping_identity() {
        let (model, tokens) = test_model();
        for y in 0..3 {
            let pmi = token_pmi(&tokens, ClassLabel::Class(y), &model).unwrap();
            let cond = model
                .log_likelihood_full(&tokens, ClassLabel::Class(y))
                .unwrap()
                .total;
            let uncond = model
                .log_likelihood_full(&tokens, ClassLabel::Null)
                .unwrap()
                .total;
            let diff = cond - uncond;
            assert_relative_eq!(pmi.total(), diff, max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn null_label_gives_zero_map() {
        let (model, tokens) = test_model();
        let pmi = token_pmi(&tokens, ClassLabel::Null, &model).unwrap();
        for g in &pmi.grids {
            assert!(g.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn pmi_needs_null_capability() {
        let (mut model, tokens) = test_model();
        model.set_null_trained(false);
        assert!(matches!(
            token_pmi(&tokens, ClassLabel::Class(0), &model),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn exactly_two_forward_passes() {
        let (model, tokens) = test_model();
        model.reset_forward_evals();
        let _ = token_pmi(&tokens, ClassLabel::Class(1), &model).unwrap();
        assert_eq!(model.forward_evals(), 2);
        model.reset_forward_evals();
        let _ = contrastive_pmi(&tokens, ClassLabel::Class(0), ClassLabel::Class(2), &model)
            .unwrap();
        assert_eq!(model.forward_evals(), 2);
    }

    #[test]
    fn contrastive_antisymmetric_and_consistent() {
        let (model, tokens) = test_model();
        let ab =
            contrastive_pmi(&tokens, ClassLabel::Class(0), ClassLabel::Class(1), &model).unwrap();
        let ba =
            contrastive_pmi(&tokens, ClassLabel::Class(1), ClassLabel::Class(0), &model).unwrap();
        let pa = token_pmi(&tokens, ClassLabel::Class(0), &model).unwrap();
        let pb = token_pmi(&tokens, ClassLabel::Class(1), &model).unwrap();
        let full_a = model
            .log_likelihood_full(&tokens, ClassLabel::Class(0))
            .unwrap()
            .total;
        let full_b = model
            .log_likelihood_full(&tokens, ClassLabel::Class(1))
            .unwrap()
            .total;
        let mut sum_ab = 0.0;
        for (k, g) in ab.grids.iter().enumerate() {
            sum_ab += g.sum();
            for (idx, v) in g.indexed_iter() {
                assert_relative_eq!(*v, -ba.grids[k][idx], epsilon = 1e-12);
                let expect = pa.grids[k][idx] - pb.grids[k][idx];
                assert_relative_eq!(*v, expect, epsilon = 1e-9);
            }
        }
        assert_relative_eq!(sum_ab, full_a - full_b, max_relative = 1e-9, epsilon = 1e-12);
    }

    #[test]
    fn contrastive_rejects_equal_labels() {
        let (model, tokens) = test_model();
        assert!(matches!(
            contrastive_pmi(&tokens, ClassLabel::Class(1), ClassLabel::Class(1), &model),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn constant_pmi_renders_constant() {
        let grids = vec![
            Array2::from_elem((1, 1), 0.7),
            Array2::from_elem((2, 2), 0.7),
            Array2::from_elem((3, 3), 0.7),
        ];
        let pmi = PMIMap {
            grids,
            label: ClassLabel::Class(0),
        };
        for mode in [HeatmapMode::FinestScale, HeatmapMode::ScaleWeightedSum] {
            let hm = render_heatmap(&pmi, (12, 12), mode).unwrap();
            assert_eq!(hm.values.dim(), (12, 12));
            for v in hm.values.iter() {
                assert_relative_eq!(*v, 0.7, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn single_hot_token_localizes() {
        let mut fine = Array2::zeros((7, 7));
        fine[(2, 5)] = 1.0;
        let pmi = PMIMap {
            grids: vec![Array2::zeros((1, 1)), fine],
            label: ClassLabel::Class(0),
        };
        let hm = render_heatmap(&pmi, (28, 28), HeatmapMode::FinestScale).unwrap();
        let (mut best, mut best_v) = ((0, 0), f64::NEG_INFINITY);
        for (idx, v) in hm.values.indexed_iter() {
            if *v > best_v {
                best_v = *v;
                best = idx;
            }
        }
        // receptive cell of token (2,5) on a 7x7 -> 28x28 upsample
        assert!(best.0 >= 8 && best.0 < 12, "row {} outside cell", best.0);
        assert!(best.1 >= 20 && best.1 < 24, "col {} outside cell", best.1);
    }

    #[test]
    fn heatmap_mode_parses() {
        assert_eq!(
            "finest_scale".parse::<HeatmapMode>().unwrap(),
            HeatmapMode::FinestScale
        );
        assert!("bogus".parse::<HeatmapMode>().is_err());
    }

    use ndarray::Array2;
}
