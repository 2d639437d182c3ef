//! Dataset ingestion: IDX files, image folders, and the built-in synthetic
//! digit corpus used when no external data is mounted.

pub mod idx;
pub mod synth;

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::nn::parallel::ordered_par_map;
use crate::tokenizer::{encode, multiscale_quantize, Image, TokenizerParams};
use crate::training::TokenExample;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::LabelOutOfRange {
                id: bad,
                n_classes,
            });
        }
        let class_names = (0..n_classes).map(|i| i.to_string()).collect();
        Ok(Self {
            images,
            labels,
            n_classes,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Image, usize)> {
        self.images.iter().zip(self.labels.iter().copied())
    }

    /// Examples whose label passes the filter, with labels unchanged.
    pub fn filter_labels(&self, keep: &[usize]) -> Self {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (img, y) in self.iter() {
            if keep.contains(&y) {
                images.push(img.clone());
                labels.push(y);
            }
        }
        Self {
            images,
            labels,
            n_classes: self.n_classes,
            class_names: self.class_names.clone(),
        }
    }

    pub fn take(&self, n: usize) -> Self {
        Self {
            images: self.images.iter().take(n).cloned().collect(),
            labels: self.labels.iter().take(n).copied().collect(),
            n_classes: self.n_classes,
            class_names: self.class_names.clone(),
        }
    }

    /// Tokenize every image (parallel, order-preserving).
    pub fn tokenize(&self, tokenizer: &TokenizerParams) -> Result<Vec<TokenExample>> {
        let pairs: Vec<(&Image, usize)> = self.iter().collect();
        let out = ordered_par_map(&pairs, |(img, y)| -> Result<TokenExample> {
            let f = encode(img, tokenizer)?;
            Ok((multiscale_quantize(&f, tokenizer)?, *y))
        });
        out.into_iter().collect()
    }
}

/// Loads `root/<class>/<image>.png` trees; class ids follow sorted directory
/// names. Images convert to single-channel [0,1], optionally resized.
pub fn load_image_folder(root: &Path, resize_to: Option<(usize, usize)>) -> Result<Dataset> {
    let mut class_dirs: Vec<std::path::PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    for (class_id, dir) in class_dirs.iter().enumerate() {
        class_names.push(
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| class_id.to_string()),
        );
        let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .map(|e| {
                        let e = e.to_string_lossy().to_lowercase();
                        e == "png" || e == "jpg" || e == "jpeg"
                    })
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file)
                .map_err(|e| Error::Data(format!("cannot read {}: {e}", file.display())))?
                .to_luma8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let mut arr = Array3::<f64>::zeros((h, w, 1));
            for (x, y, px) in img.enumerate_pixels() {
                arr[(y as usize, x as usize, 0)] = px.0[0] as f64 / 255.0;
            }
            let arr = if let Some((th, tw)) = resize_to {
                crate::nn::resample::bilinear_resize(arr.view(), th, tw)
            } else {
                arr
            };
            let chw = arr.permuted_axes([2, 0, 1]).as_standard_layout().to_owned();
            images.push(Image::from_clamped(chw));
            labels.push(class_id);
        }
    }
    let n_classes = class_names.len();
    let mut ds = Dataset::new(images, labels, n_classes)?;
    ds.class_names = class_names;
    Ok(ds)
}
