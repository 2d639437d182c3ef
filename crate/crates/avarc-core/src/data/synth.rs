//! Deterministic synthetic image corpora.
//!
//! `synthetic_digits` renders the ten digits from hand-laid vector strokes
//! with per-sample affine jitter, stroke wobble, thickness and intensity
//! variation plus pixel noise; it stands in for handwritten-digit data when
//! none is mounted. `pattern_classes` builds many-class smooth textures for
//! synthetic benchmark tasks.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::rng::{derive_rng, SeedRng};
use crate::tokenizer::Image;

const SIDE: usize = 28;

type Pt = (f64, f64);

fn line(a: Pt, b: Pt, out: &mut Vec<Pt>) {
    let steps = (((b.0 - a.0).hypot(b.1 - a.1)) * 22.0 / 0.22).ceil().max(2.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        out.push((a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t));
    }
}

/// Elliptic arc in unit coordinates, y pointing down. theta = -pi/2 is the
/// top of the ellipse, 0 the right, pi/2 the bottom.
fn arc(cx: f64, cy: f64, rx: f64, ry: f64, a0: f64, a1: f64, out: &mut Vec<Pt>) {
    let steps = ((a1 - a0).abs() * rx.max(ry) * 22.0 / 0.22).ceil().max(8.0) as usize;
    for i in 0..=steps {
        let t = a0 + (a1 - a0) * i as f64 / steps as f64;
        out.push((cx + rx * t.cos(), cy + ry * t.sin()));
    }
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, out: &mut Vec<Pt>) {
    arc(cx, cy, rx, ry, 0.0, 2.0 * std::f64::consts::PI, out);
}

/// Stroke polylines for one digit in the unit square.
fn digit_strokes(digit: usize) -> Vec<Vec<Pt>> {
    use std::f64::consts::PI;
    let mut strokes: Vec<Vec<Pt>> = Vec::new();
    let mut s = Vec::new();
    match digit {
        0 => {
            ellipse(0.50, 0.50, 0.30, 0.40, &mut s);
            strokes.push(s);
        }
        1 => {
            line((0.38, 0.24), (0.56, 0.08), &mut s);
            line((0.56, 0.08), (0.56, 0.92), &mut s);
            strokes.push(s);
        }
        2 => {
            arc(0.50, 0.32, 0.26, 0.24, -PI, 0.15 * PI, &mut s);
            let end = *s.last().unwrap();
            line(end, (0.25, 0.90), &mut s);
            line((0.25, 0.90), (0.78, 0.90), &mut s);
            strokes.push(s);
        }
        3 => {
            arc(0.47, 0.30, 0.25, 0.22, -0.80 * PI, 0.50 * PI, &mut s);
            strokes.push(s);
            let mut s2 = Vec::new();
            arc(0.47, 0.71, 0.27, 0.23, -0.50 * PI, 0.80 * PI, &mut s2);
            strokes.push(s2);
        }
        4 => {
            line((0.62, 0.08), (0.20, 0.60), &mut s);
            line((0.20, 0.60), (0.84, 0.60), &mut s);
            strokes.push(s);
            let mut s2 = Vec::new();
            line((0.64, 0.08), (0.64, 0.92), &mut s2);
            strokes.push(s2);
        }
        5 => {
            line((0.76, 0.10), (0.32, 0.10), &mut s);
            line((0.32, 0.10), (0.30, 0.46), &mut s);
            arc(0.48, 0.66, 0.26, 0.24, -0.60 * PI, 0.70 * PI, &mut s);
            strokes.push(s);
        }
        6 => {
            arc(0.55, 0.50, 0.31, 0.42, -0.30 * PI, -1.05 * PI, &mut s);
            strokes.push(s);
            let mut s2 = Vec::new();
            ellipse(0.51, 0.69, 0.24, 0.21, &mut s2);
            strokes.push(s2);
        }
        7 => {
            line((0.24, 0.12), (0.78, 0.12), &mut s);
            line((0.78, 0.12), (0.40, 0.90), &mut s);
            strokes.push(s);
        }
        8 => {
            ellipse(0.50, 0.30, 0.21, 0.19, &mut s);
            strokes.push(s);
            let mut s2 = Vec::new();
            ellipse(0.50, 0.71, 0.25, 0.22, &mut s2);
            strokes.push(s2);
        }
        9 => {
            ellipse(0.50, 0.33, 0.24, 0.21, &mut s);
            strokes.push(s);
            let mut s2 = Vec::new();
            line((0.74, 0.38), (0.60, 0.90), &mut s2);
            strokes.push(s2);
        }
        _ => unreachable!("digits are 0..9"),
    }
    strokes
}

struct Jitter {
    rot: f64,
    sx: f64,
    sy: f64,
    shear: f64,
    tx: f64,
    ty: f64,
    wobble_amp: (f64, f64),
    wobble_freq: (f64, f64),
    wobble_phase: (f64, f64),
    half_thick: f64,
    intensity: f64,
}

impl Jitter {
    fn sample(rng: &mut SeedRng) -> Self {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut n = |std: f64, clamp: f64| (normal.sample(rng) * std).clamp(-clamp, clamp);
        let rot = n(0.10, 0.26);
        let shear = n(0.10, 0.26);
        let sx = (1.0 + n(0.08, 0.18)).clamp(0.82, 1.18);
        let sy = (1.0 + n(0.08, 0.18)).clamp(0.82, 1.18);
        Self {
            rot,
            sx,
            sy,
            shear,
            tx: rng.random_range(-2.0..2.0),
            ty: rng.random_range(-2.0..2.0),
            wobble_amp: (rng.random_range(0.0..0.035), rng.random_range(0.0..0.035)),
            wobble_freq: (rng.random_range(0.6..1.6), rng.random_range(0.6..1.6)),
            wobble_phase: (
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            ),
            half_thick: rng.random_range(0.55..1.05),
            intensity: rng.random_range(0.85..1.0),
        }
    }

    /// Unit coords -> jittered pixel coords.
    fn apply(&self, p: Pt) -> Pt {
        // hand-drawn wobble in unit space
        let x = p.0
            + self.wobble_amp.0
                * (std::f64::consts::TAU * (self.wobble_freq.0 * p.1) + self.wobble_phase.0).sin();
        let y = p.1
            + self.wobble_amp.1
                * (std::f64::consts::TAU * (self.wobble_freq.1 * x) + self.wobble_phase.1).sin();
        // to pixel space, centered
        let px = 3.0 + 22.0 * x - 14.0;
        let py = 3.0 + 22.0 * y - 14.0;
        // shear, scale, rotate about the center
        let sxp = (px + self.shear * py) * self.sx;
        let syp = py * self.sy;
        let (c, s) = (self.rot.cos(), self.rot.sin());
        (
            c * sxp - s * syp + 14.0 + self.tx,
            s * sxp + c * syp + 14.0 + self.ty,
        )
    }
}

fn render_digit(digit: usize, rng: &mut SeedRng) -> Image {
    let jitter = Jitter::sample(rng);
    let mut canvas = vec![0.0f64; SIDE * SIDE];
    for stroke in digit_strokes(digit) {
        for p in stroke {
            let (px, py) = jitter.apply(p);
            let r = jitter.half_thick;
            let reach = r + 1.2;
            let x0 = (px - reach).floor().max(0.0) as usize;
            let x1 = (px + reach).ceil().min((SIDE - 1) as f64) as usize;
            let y0 = (py - reach).floor().max(0.0) as usize;
            let y1 = (py + reach).ceil().min((SIDE - 1) as f64) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d = ((x as f64 - px).powi(2) + (y as f64 - py).powi(2)).sqrt();
                    let v = ((r + 0.6 - d) / 0.6).clamp(0.0, 1.0) * jitter.intensity;
                    let cell = &mut canvas[y * SIDE + x];
                    if v > *cell {
                        *cell = v;
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0, 0.02).unwrap();
    let arr = Array3::from_shape_fn((1, SIDE, SIDE), |(_, y, x)| {
        (canvas[y * SIDE + x] + noise.sample(rng)).clamp(0.0, 1.0)
    });
    Image::from_clamped(arr)
}

/// `n` jittered 28x28 digit images, classes round-robin, fully determined by
/// the seed.
pub fn synthetic_digits(n: usize, seed: u64) -> Dataset {
    let mut rng = derive_rng(seed, "synthetic-digits");
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        images.push(render_digit(digit, &mut rng));
        labels.push(digit);
    }
    Dataset::new(images, labels, 10).expect("generator labels are valid")
}

/// Many-class corpus of smooth random textures: each class is a fixed
/// low-frequency pattern; samples are random crops with pixel noise.
pub fn pattern_classes(
    n_classes: usize,
    per_class: usize,
    hw: (usize, usize),
    seed: u64,
) -> Dataset {
    let (h, w) = hw;
    let margin = 8usize;
    let mut rng = derive_rng(seed, "pattern-classes");
    let normal = Normal::new(0.0, 1.0).unwrap();
    let noise = Normal::new(0.0, 0.05).unwrap();

    let mut images = Vec::with_capacity(n_classes * per_class);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for class in 0..n_classes {
        // low-resolution seed grid, upsampled into a smooth canvas
        let grid = Array3::from_shape_fn((9, 9, 1), |_| normal.sample(&mut rng));
        let big = crate::nn::resample::bilinear_resize(grid.view(), h + margin, w + margin);
        let (lo, hi) = big.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| {
            (a.0.min(v), a.1.max(v))
        });
        let span = (hi - lo).max(1e-9);
        for _ in 0..per_class {
            let oy = rng.random_range(0..=margin);
            let ox = rng.random_range(0..=margin);
            let arr = Array3::from_shape_fn((1, h, w), |(_, y, x)| {
                let v = (big[(y + oy, x + ox, 0)] - lo) / span * 0.8 + 0.1;
                (v + noise.sample(&mut rng)).clamp(0.0, 1.0)
            });
            images.push(Image::from_clamped(arr));
            labels.push(class);
        }
    }
    Dataset::new(images, labels, n_classes).expect("generator labels are valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let a = synthetic_digits(20, 5);
        let b = synthetic_digits(20, 5);
        for (x, y) in a.images.iter().zip(b.images.iter()) {
            assert_eq!(x, y);
        }
        let c = synthetic_digits(20, 6);
        assert_ne!(a.images[0], c.images[0]);
    }

    #[test]
    fn digits_are_balanced_and_in_range() {
        let ds = synthetic_digits(100, 1);
        let mut counts = [0usize; 10];
        for &l in &ds.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10));
        for img in &ds.images {
            assert_eq!(img.dims(), (1, 28, 28));
            assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn same_class_varies_between_samples() {
        let ds = synthetic_digits(30, 2);
        // samples 0 and 10 are both digit 0 but jittered differently
        assert_ne!(ds.images[0], ds.images[10]);
    }

    #[test]
    fn digits_have_ink() {
        let ds = synthetic_digits(10, 3);
        for (img, label) in ds.iter() {
            let mass: f64 = img.pixels().iter().sum();
            assert!(mass > 20.0, "digit {label} has almost no ink ({mass})");
        }
    }

    #[test]
    fn pattern_classes_shapes() {
        let ds = pattern_classes(7, 3, (16, 16), 9);
        assert_eq!(ds.len(), 21);
        assert_eq!(ds.n_classes, 7);
        assert_eq!(ds.images[0].dims(), (1, 16, 16));
    }
}
