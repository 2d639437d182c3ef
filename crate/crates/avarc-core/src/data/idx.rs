//! IDX image/label files (the MNIST container format): big-endian magic
//! 0x00000803 for images, 0x00000801 for labels. Plain or gzip-compressed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::bufread::GzDecoder;
use ndarray::Array3;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tokenizer::Image;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

fn read_u32_be(r: &mut dyn Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

pub fn read_idx_images(path: &Path) -> Result<Vec<Image>> {
    let mut r = open_maybe_gz(path)?;
    let magic = read_u32_be(&mut r)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX image magic {magic:#010x} in {} (expected {IMAGES_MAGIC:#010x})",
            path.display()
        )));
    }
    let n = read_u32_be(&mut r)? as usize;
    let rows = read_u32_be(&mut r)? as usize;
    let cols = read_u32_be(&mut r)? as usize;
    let mut raw = vec![0u8; n * rows * cols];
    r.read_exact(&mut raw)?;
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let base = i * rows * cols;
        let arr = Array3::from_shape_fn((1, rows, cols), |(_, y, x)| {
            raw[base + y * cols + x] as f64 / 255.0
        });
        images.push(Image::from_clamped(arr));
    }
    Ok(images)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = open_maybe_gz(path)?;
    let magic = read_u32_be(&mut r)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX label magic {magic:#010x} in {} (expected {LABELS_MAGIC:#010x})",
            path.display()
        )));
    }
    let n = read_u32_be(&mut r)? as usize;
    let mut raw = vec![0u8; n];
    r.read_exact(&mut raw)?;
    Ok(raw.into_iter().map(|b| b as usize).collect())
}

pub fn write_idx_images(path: &Path, images: &[Image]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let (_, rows, cols) = images
        .first()
        .map(|i| i.dims())
        .ok_or_else(|| Error::Data("no images to write".into()))?;
    w.write_all(&IMAGES_MAGIC.to_be_bytes())?;
    w.write_all(&(images.len() as u32).to_be_bytes())?;
    w.write_all(&(rows as u32).to_be_bytes())?;
    w.write_all(&(cols as u32).to_be_bytes())?;
    for img in images {
        let px = img.pixels();
        for y in 0..rows {
            for x in 0..cols {
                w.write_all(&[(px[(0, y, x)] * 255.0).round().clamp(0.0, 255.0) as u8])?;
            }
        }
    }
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    for &l in labels {
        if l > 255 {
            return Err(Error::Data(format!("label {l} does not fit in a byte")));
        }
        w.write_all(&[l as u8])?;
    }
    Ok(())
}

fn find_pair(dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    let pick = |name: &str| -> Result<PathBuf> {
        for cand in [
            dir.join(name),
            dir.join(format!("{name}.gz")),
        ] {
            if cand.exists() {
                return Ok(cand);
            }
        }
        Err(Error::Data(format!(
            "missing {name}[.gz] under {}",
            dir.display()
        )))
    };
    Ok((
        pick(&format!("{stem}-images-idx3-ubyte"))?,
        pick(&format!("{stem}-labels-idx1-ubyte"))?,
    ))
}

/// Loads the standard four-file train/test layout from a directory.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut out = Vec::with_capacity(2);
    for stem in ["train", "t10k"] {
        let (ipath, lpath) = find_pair(dir, stem)?;
        let images = read_idx_images(&ipath)?;
        let labels = read_idx_labels(&lpath)?;
        out.push(Dataset::new(images, labels, 10)?);
    }
    let test = out.pop().unwrap();
    let train = out.pop().unwrap();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_images_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let ds = crate::data::synth::synthetic_digits(12, 3);
        let ipath = dir.path().join("train-images-idx3-ubyte");
        let lpath = dir.path().join("train-labels-idx1-ubyte");
        write_idx_images(&ipath, &ds.images).unwrap();
        write_idx_labels(&lpath, &ds.labels).unwrap();

        let images = read_idx_images(&ipath).unwrap();
        let labels = read_idx_labels(&lpath).unwrap();
        assert_eq!(images.len(), 12);
        assert_eq!(labels, ds.labels);
        // u8 quantization: within half a step
        let a = images[0].pixels();
        let b = ds.images[0].pixels();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn magic_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus-images-idx3-ubyte");
        std::fs::write(&path, [0u8, 0, 8, 99, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 1]).unwrap();
        assert!(matches!(read_idx_images(&path), Err(Error::Format(_))));
    }
}
