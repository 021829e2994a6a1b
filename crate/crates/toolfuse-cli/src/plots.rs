//! Minimal PNG plot emission: bar charts and line plots with optional CI
//! bands, drawn directly into pixel buffers. Axis extremes are labeled with
//! a tiny built-in digit font; anything fancier belongs in a notebook.

use std::path::Path;

use image::{Rgb, RgbImage};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 420;
const MARGIN: u32 = 48;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const SERIES_COLORS: [Rgb<u8>; 4] =
    [Rgb([31, 119, 180]), Rgb([255, 127, 14]), Rgb([44, 160, 44]), Rgb([214, 39, 40])];

/// 3x5 glyphs for "0123456789.-", one bit per pixel, row-major.
const GLYPHS: [(char, [u8; 5]); 12] = [
    ('0', [0b111, 0b101, 0b101, 0b101, 0b111]),
    ('1', [0b010, 0b110, 0b010, 0b010, 0b111]),
    ('2', [0b111, 0b001, 0b111, 0b100, 0b111]),
    ('3', [0b111, 0b001, 0b111, 0b001, 0b111]),
    ('4', [0b101, 0b101, 0b111, 0b001, 0b001]),
    ('5', [0b111, 0b100, 0b111, 0b001, 0b111]),
    ('6', [0b111, 0b100, 0b111, 0b101, 0b111]),
    ('7', [0b111, 0b001, 0b010, 0b010, 0b010]),
    ('8', [0b111, 0b101, 0b111, 0b101, 0b111]),
    ('9', [0b111, 0b101, 0b111, 0b001, 0b111]),
    ('.', [0b000, 0b000, 0b000, 0b000, 0b010]),
    ('-', [0b000, 0b000, 0b111, 0b000, 0b000]),
];

fn draw_text(img: &mut RgbImage, text: &str, x: u32, y: u32) {
    let mut cx = x;
    for ch in text.chars() {
        if let Some((_, rows)) = GLYPHS.iter().find(|(g, _)| *g == ch) {
            for (dy, row) in rows.iter().enumerate() {
                for dx in 0..3u32 {
                    if row >> (2 - dx) & 1 == 1 {
                        let (px, py) = (cx + dx, y + dy as u32);
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, AXIS);
                        }
                    }
                }
            }
        }
        cx += 4;
    }
}

fn format_tick(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e6 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        let fx = (x - self.x_min) / (self.x_max - self.x_min).max(1e-12);
        let fy = (y - self.y_min) / (self.y_max - self.y_min).max(1e-12);
        (
            MARGIN as f64 + fx * (WIDTH - 2 * MARGIN) as f64,
            (HEIGHT - MARGIN) as f64 - fy * (HEIGHT - 2 * MARGIN) as f64,
        )
    }

    fn draw_axes(&self, img: &mut RgbImage) {
        let (x0, y0) = self.to_px(self.x_min, self.y_min);
        let (x1, _) = self.to_px(self.x_max, self.y_min);
        let (_, y1) = self.to_px(self.x_min, self.y_max);
        draw_line(img, (x0, y0), (x1, y0), AXIS);
        draw_line(img, (x0, y0), (x0, y1), AXIS);
        draw_text(img, &format_tick(self.y_min), 4, y0 as u32 - 2);
        draw_text(img, &format_tick(self.y_max), 4, y1 as u32);
        draw_text(img, &format_tick(self.x_min), x0 as u32, HEIGHT - MARGIN + 8);
        draw_text(img, &format_tick(self.x_max), x1 as u32 - 12, HEIGHT - MARGIN + 8);
    }
}

/// Vertical bar chart; bars are evenly spaced in input order.
pub fn bar_chart(path: &Path, values: &[f64]) -> Result<(), String> {
    if values.is_empty() {
        return Err("bar chart needs at least one value".into());
    }
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BG);
    let y_min = values.iter().cloned().fold(0.0f64, f64::min);
    let y_max = values.iter().cloned().fold(0.0f64, f64::max).max(y_min + 1e-9);
    let frame = Frame { x_min: 0.0, x_max: values.len() as f64, y_min, y_max };
    frame.draw_axes(&mut img);
    let slot = (WIDTH - 2 * MARGIN) as f64 / values.len() as f64;
    for (i, &v) in values.iter().enumerate() {
        let (_, y_top) = frame.to_px(0.0, v.max(0.0));
        let (_, y_bot) = frame.to_px(0.0, v.min(0.0));
        let x_left = MARGIN as f64 + i as f64 * slot + slot * 0.15;
        let x_right = MARGIN as f64 + (i as f64 + 1.0) * slot - slot * 0.15;
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let mut x = x_left;
        while x <= x_right {
            draw_line(&mut img, (x, y_top), (x, y_bot), color);
            x += 1.0;
        }
    }
    img.save(path).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

/// One plotted series: points plus an optional symmetric CI half-width.
pub struct Series {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub ci_half_widths: Option<Vec<f64>>,
}

/// Line plot of one or more series sharing axes.
pub fn line_plot(path: &Path, series: &[Series]) -> Result<(), String> {
    if series.is_empty() || series.iter().any(|s| s.xs.len() != s.ys.len() || s.xs.is_empty()) {
        return Err("line plot needs nonempty, aligned series".into());
    }
    let all_x: Vec<f64> = series.iter().flat_map(|s| s.xs.iter().cloned()).collect();
    let mut all_y = Vec::new();
    for s in series {
        for (i, &y) in s.ys.iter().enumerate() {
            let hw = s.ci_half_widths.as_ref().map_or(0.0, |h| h[i]);
            all_y.push(y - hw);
            all_y.push(y + hw);
        }
    }
    let pad = 1e-9;
    let frame = Frame {
        x_min: all_x.iter().cloned().fold(f64::INFINITY, f64::min),
        x_max: all_x.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + pad,
        y_min: all_y.iter().cloned().fold(f64::INFINITY, f64::min),
        y_max: all_y.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + pad,
    };
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BG);
    for (si, s) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        if let Some(hws) = &s.ci_half_widths {
            let band = Rgb([
                color.0[0].saturating_add(60),
                color.0[1].saturating_add(60),
                color.0[2].saturating_add(60),
            ]);
            for (i, (&x, &y)) in s.xs.iter().zip(&s.ys).enumerate() {
                let lo = frame.to_px(x, y - hws[i]);
                let hi = frame.to_px(x, y + hws[i]);
                draw_line(&mut img, lo, hi, band);
            }
        }
        for w in s.xs.iter().zip(&s.ys).collect::<Vec<_>>().windows(2) {
            let a = frame.to_px(*w[0].0, *w[0].1);
            let b = frame.to_px(*w[1].0, *w[1].1);
            draw_line(&mut img, a, b, color);
        }
        for (&x, &y) in s.xs.iter().zip(&s.ys) {
            let (px, py) = frame.to_px(x, y);
            for dx in -2i64..=2 {
                for dy in -2i64..=2 {
                    let (qx, qy) = (px as i64 + dx, py as i64 + dy);
                    if qx >= 0 && qy >= 0 && (qx as u32) < WIDTH && (qy as u32) < HEIGHT {
                        img.put_pixel(qx as u32, qy as u32, color);
                    }
                }
            }
        }
    }
    frame.draw_axes(&mut img);
    img.save(path).map_err(|e| format!("cannot write {}: {e}", path.display()))
}
