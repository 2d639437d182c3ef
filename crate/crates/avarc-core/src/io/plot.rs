//! Minimal PNG line charts: axes, ticks, series polylines and a legend,
//! rendered with a built-in 5x7 pixel font. No font files needed.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
}

pub const PALETTE: [[u8; 3]; 4] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [148, 103, 189],
];

/// 5x7 glyphs; bit 4 is the leftmost column.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_lowercase() {
        '0' => [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e],
        '1' => [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e],
        '2' => [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f],
        '3' => [0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e],
        '4' => [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02],
        '5' => [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e],
        '6' => [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e],
        '7' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e],
        '9' => [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c],
        '-' => [0x00, 0x00, 0x00, 0x1f, 0x00, 0x00, 0x00],
        '%' => [0x19, 0x1a, 0x02, 0x04, 0x08, 0x0b, 0x13],
        '/' => [0x01, 0x02, 0x02, 0x04, 0x08, 0x08, 0x10],
        ' ' => [0; 7],
        'a' => [0x00, 0x00, 0x0e, 0x01, 0x0f, 0x11, 0x0f],
        'b' => [0x10, 0x10, 0x1e, 0x11, 0x11, 0x11, 0x1e],
        'c' => [0x00, 0x00, 0x0e, 0x10, 0x10, 0x11, 0x0e],
        'd' => [0x01, 0x01, 0x0f, 0x11, 0x11, 0x11, 0x0f],
        'e' => [0x00, 0x00, 0x0e, 0x11, 0x1f, 0x10, 0x0e],
        'f' => [0x06, 0x09, 0x08, 0x1c, 0x08, 0x08, 0x08],
        'g' => [0x00, 0x0f, 0x11, 0x11, 0x0f, 0x01, 0x0e],
        'h' => [0x10, 0x10, 0x1e, 0x11, 0x11, 0x11, 0x11],
        'i' => [0x04, 0x00, 0x0c, 0x04, 0x04, 0x04, 0x0e],
        'j' => [0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0c],
        'k' => [0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12],
        'l' => [0x0c, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e],
        'm' => [0x00, 0x00, 0x1a, 0x15, 0x15, 0x15, 0x15],
        'n' => [0x00, 0x00, 0x1e, 0x11, 0x11, 0x11, 0x11],
        'o' => [0x00, 0x00, 0x0e, 0x11, 0x11, 0x11, 0x0e],
        'p' => [0x00, 0x00, 0x1e, 0x11, 0x1e, 0x10, 0x10],
        'q' => [0x00, 0x00, 0x0f, 0x11, 0x0f, 0x01, 0x01],
        'r' => [0x00, 0x00, 0x16, 0x18, 0x10, 0x10, 0x10],
        's' => [0x00, 0x00, 0x0f, 0x10, 0x0e, 0x01, 0x1e],
        't' => [0x08, 0x08, 0x1c, 0x08, 0x08, 0x09, 0x06],
        'u' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0d],
        'v' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x0a, 0x04],
        'w' => [0x00, 0x00, 0x11, 0x15, 0x15, 0x15, 0x0a],
        'x' => [0x00, 0x00, 0x11, 0x0a, 0x04, 0x0a, 0x11],
        'y' => [0x00, 0x00, 0x11, 0x11, 0x0f, 0x01, 0x0e],
        'z' => [0x00, 0x00, 0x1f, 0x02, 0x04, 0x08, 0x1f],
        _ => [0x1f, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1f],
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: [u8; 3]) {
    let mut cx = x;
    for c in text.chars() {
        let g = glyph(c);
        for (row, bits) in g.iter().enumerate() {
            for col in 0..5 {
                if bits & (0x10 >> col) != 0 {
                    let (px, py) = (cx + col as i64, y + row as i64);
                    if px >= 0 && py >= 0 && px < img.width() as i64 && py < img.height() as i64 {
                        img.put_pixel(px as u32, py as u32, Rgb(color));
                    }
                }
            }
        }
        cx += 6;
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(mag * 10.0);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-12 {
        out.push(t);
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 1000.0 || a < 0.01 {
        format!("{v:.1e}")
    } else if a >= 10.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Renders one or more series into a PNG line chart.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Parameter("no points to plot".into()));
    }
    let (w, h) = (640u32, 440u32);
    let (ml, mr, mt, mb) = (64.0, 16.0, 28.0, 44.0);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));

    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for s in series {
        for &(x, y) in &s.points {
            xs.push(x);
            ys.push(y);
        }
    }
    let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| {
        (a.0.min(v), a.1.max(v))
    });
    let (y0, y1) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| {
        (a.0.min(v), a.1.max(v))
    });
    let xpad = ((x1 - x0) * 0.05).max(1e-9);
    let ypad = ((y1 - y0) * 0.08).max(1e-9);
    let (x0, x1) = (x0 - xpad, x1 + xpad);
    let (y0, y1) = (y0 - ypad, y1 + ypad);

    let to_px = |x: f64, y: f64| -> (f64, f64) {
        (
            ml + (x - x0) / (x1 - x0) * (w as f64 - ml - mr),
            (h as f64 - mb) - (y - y0) / (y1 - y0) * (h as f64 - mt - mb),
        )
    };

    let axis = [60u8, 60, 60];
    let grid = [220u8, 220, 220];
    for t in nice_ticks(x0, x1) {
        let (px, _) = to_px(t, y0);
        draw_line(&mut img, (px, mt), (px, h as f64 - mb), grid);
        draw_text(&mut img, px as i64 - 8, (h as f64 - mb) as i64 + 6, &fmt_tick(t), axis);
    }
    for t in nice_ticks(y0, y1) {
        let (_, py) = to_px(x0, t);
        draw_line(&mut img, (ml, py), (w as f64 - mr, py), grid);
        draw_text(&mut img, 8, py as i64 - 3, &fmt_tick(t), axis);
    }
    draw_line(&mut img, (ml, mt), (ml, h as f64 - mb), axis);
    draw_line(&mut img, (ml, h as f64 - mb), (w as f64 - mr, h as f64 - mb), axis);
    draw_text(&mut img, (w / 2) as i64 - 3 * title.len() as i64, 8, title, [0, 0, 0]);
    draw_text(
        &mut img,
        (w / 2) as i64 - 3 * x_label.len() as i64,
        h as i64 - 14,
        x_label,
        axis,
    );
    draw_text(&mut img, 8, 10, y_label, axis);

    for (si, s) in series.iter().enumerate() {
        let mut prev: Option<(f64, f64)> = None;
        for &(x, y) in &s.points {
            let p = to_px(x, y);
            if let Some(q) = prev {
                draw_line(&mut img, q, p, s.color);
                draw_line(&mut img, (q.0, q.1 + 1.0), (p.0, p.1 + 1.0), s.color);
            }
            // point marker
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (px, py) = (p.0 as i64 + dx, p.1 as i64 + dy);
                    if px >= 0 && py >= 0 && (px as u32) < w && (py as u32) < h {
                        img.put_pixel(px as u32, py as u32, Rgb(s.color));
                    }
                }
            }
            prev = Some(p);
        }
        // legend
        let ly = mt as i64 + 4 + 12 * si as i64;
        let lx = (w as f64 - mr) as i64 - 150;
        draw_line(
            &mut img,
            (lx as f64, ly as f64 + 3.0),
            (lx as f64 + 16.0, ly as f64 + 3.0),
            s.color,
        );
        draw_text(&mut img, lx + 22, ly, &s.label, axis);
    }

    img.save(path)
        .map_err(|e| Error::Format(format!("cannot write chart {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_a_chart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chart.png");
        let series = vec![
            Series {
                label: "accuracy".into(),
                points: (1..=5).map(|k| (k as f64, 0.5 + 0.1 * k as f64)).collect(),
                color: PALETTE[0],
            },
            Series {
                label: "runtime ms".into(),
                points: (1..=5).map(|k| (k as f64, 2.0 * k as f64)).collect(),
                color: PALETTE[1],
            },
        ];
        line_chart(&path, "sweep", "scales", "value", &series).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.width(), 640);
        // has some non-white pixels
        assert!(img.pixels().any(|p| p.0 != [255, 255, 255]));
    }

    #[test]
    fn empty_series_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        assert!(line_chart(&path, "t", "x", "y", &[]).is_err());
    }
}
