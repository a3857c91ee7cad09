//! Minimal line-plot renderer for training reports.
//!
//! Draws straight into an RGB buffer with an embedded 5x7 bitmap font, so
//! report generation needs no system fonts or plotting toolkits. Series may
//! contain NaN values; those points split the line instead of drawing it.

use std::path::Path;

use crate::error::{Error, Result};

/// 5x7 glyphs, one byte per row, low five bits used, bit 4 leftmost.
/// Lowercase letters reuse the uppercase shapes.
fn glyph(ch: char) -> [u8; 7] {
    let c = ch.to_ascii_uppercase();
    match c {
        '0' => [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        '1' => [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        '2' => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
        '3' => [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
        '4' => [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        '5' => [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        '6' => [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        '7' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        '8' => [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        '9' => [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
        'A' => [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'B' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110],
        'C' => [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110],
        'D' => [0b11100, 0b10010, 0b10001, 0b10001, 0b10001, 0b10010, 0b11100],
        'E' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111],
        'F' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000],
        'G' => [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111],
        'H' => [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'I' => [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        'J' => [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100],
        'K' => [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001],
        'L' => [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111],
        'M' => [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001],
        'N' => [0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001],
        'O' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'P' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000],
        'Q' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101],
        'R' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001],
        'S' => [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110],
        'T' => [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
        'U' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'V' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100],
        'W' => [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010],
        'X' => [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001],
        'Y' => [0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b00100],
        'Z' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111],
        '.' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b01100, 0b01100],
        ',' => [0b00000, 0b00000, 0b00000, 0b00000, 0b01100, 0b00100, 0b01000],
        '-' => [0b00000, 0b00000, 0b00000, 0b11111, 0b00000, 0b00000, 0b00000],
        '_' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b11111],
        '/' => [0b00001, 0b00010, 0b00100, 0b00100, 0b00100, 0b01000, 0b10000],
        '+' => [0b00000, 0b00100, 0b00100, 0b11111, 0b00100, 0b00100, 0b00000],
        '(' => [0b00010, 0b00100, 0b01000, 0b01000, 0b01000, 0b00100, 0b00010],
        ')' => [0b01000, 0b00100, 0b00010, 0b00010, 0b00010, 0b00100, 0b01000],
        ':' => [0b00000, 0b01100, 0b01100, 0b00000, 0b01100, 0b01100, 0b00000],
        '%' => [0b11001, 0b11010, 0b00010, 0b00100, 0b01000, 0b01011, 0b10011],
        '=' => [0b00000, 0b00000, 0b11111, 0b00000, 0b11111, 0b00000, 0b00000],
        '#' => [0b01010, 0b01010, 0b11111, 0b01010, 0b11111, 0b01010, 0b01010],
        _ => [0; 7],
    }
}

const GLYPH_W: usize = 5;
const GLYPH_STEP: usize = 6;

struct Canvas {
    w: usize,
    h: usize,
    pixels: Vec<[u8; 3]>,
}

impl Canvas {
    fn new(w: usize, h: usize, background: [u8; 3]) -> Self {
        Self {
            w,
            h,
            pixels: vec![background; w * h],
        }
    }

    fn set(&mut self, x: isize, y: isize, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            self.pixels[y as usize * self.w + x as usize] = color;
        }
    }

    fn line(&mut self, x0: isize, y0: isize, x1: isize, y1: isize, color: [u8; 3]) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        let (mut x, mut y) = (x0, y0);
        loop {
            self.set(x, y, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn text(&mut self, x: isize, y: isize, s: &str, color: [u8; 3]) {
        let mut cx = x;
        for ch in s.chars() {
            let rows = glyph(ch);
            for (ry, row) in rows.iter().enumerate() {
                for rx in 0..GLYPH_W {
                    if row & (1 << (GLYPH_W - 1 - rx)) != 0 {
                        self.set(cx + rx as isize, y + ry as isize, color);
                    }
                }
            }
            cx += GLYPH_STEP as isize;
        }
    }

    fn into_image(self) -> image::RgbImage {
        let mut img = image::RgbImage::new(self.w as u32, self.h as u32);
        for (x, y, p) in img.enumerate_pixels_mut() {
            p.0 = self.pixels[y as usize * self.w as u32 as usize + x as usize];
        }
        img
    }
}

fn text_width(s: &str) -> usize {
    s.chars().count() * GLYPH_STEP
}

/// Round a tick step up to a 1/2/2.5/5 times power-of-ten value.
fn nice_step(raw: f64) -> f64 {
    if raw <= 0.0 || !raw.is_finite() {
        return 1.0;
    }
    let mag = 10f64.powf(raw.log10().floor());
    let frac = raw / mag;
    let nice = if frac <= 1.0 {
        1.0
    } else if frac <= 2.0 {
        2.0
    } else if frac <= 2.5 {
        2.5
    } else if frac <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 10000.0 || a < 0.001 {
        return format!("{v:.1e}");
    }
    let mut s = format!("{v:.4}");
    while s.contains('.') && (s.ends_with('0') || s.ends_with('.')) {
        s.pop();
    }
    s
}

pub const PALETTE: [[u8; 3]; 6] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 130, 140],
];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
}

/// A titled line chart with labeled axes, ticks, and a legend.
#[derive(Debug, Clone)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

impl LinePlot {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            series: Vec::new(),
        }
    }

    /// Add a series, coloring it from the fixed palette in order.
    pub fn add_series(&mut self, label: &str, points: Vec<(f64, f64)>) {
        let color = PALETTE[self.series.len() % PALETTE.len()];
        self.series.push(Series {
            label: label.into(),
            points,
            color,
        });
    }

    fn bounds(&self) -> Result<(f64, f64, f64, f64)> {
        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for s in &self.series {
            for &(x, y) in &s.points {
                if x.is_finite() && y.is_finite() {
                    xs.push(x);
                    ys.push(y);
                }
            }
        }
        if xs.is_empty() {
            return Err(Error::Data(format!(
                "plot {:?} has no finite points",
                self.title
            )));
        }
        let (mut x0, mut x1) = (
            xs.iter().cloned().fold(f64::INFINITY, f64::min),
            xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
        let (mut y0, mut y1) = (
            ys.iter().cloned().fold(f64::INFINITY, f64::min),
            ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
        if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let ypad = (y1 - y0) * 0.05;
        Ok((x0, x1, y0 - ypad, y1 + ypad))
    }

    pub fn render(&self, width: usize, height: usize) -> Result<image::RgbImage> {
        if width < 160 || height < 120 {
            return Err(Error::Config(format!(
                "plot size {width}x{height} is too small (minimum 160x120)"
            )));
        }
        let (x0, x1, y0, y1) = self.bounds()?;
        let bg = [255u8; 3];
        let fg = [40u8, 40, 40];
        let grid = [225u8, 225, 225];
        let mut canvas = Canvas::new(width, height, bg);

        let left = 64isize;
        let right = width as isize - 16;
        let top = 30isize;
        let bottom = height as isize - 40;
        let to_px = |x: f64, y: f64| -> (isize, isize) {
            let fx = (x - x0) / (x1 - x0);
            let fy = (y - y0) / (y1 - y0);
            (
                left + (fx * (right - left) as f64).round() as isize,
                bottom - (fy * (bottom - top) as f64).round() as isize,
            )
        };

        canvas.text(
            (width as isize - text_width(&self.title) as isize) / 2,
            8,
            &self.title,
            fg,
        );

        let xstep = nice_step((x1 - x0) / 5.0);
        let mut tx = (x0 / xstep).ceil() * xstep;
        while tx <= x1 + 1e-12 {
            let (px, _) = to_px(tx, y0);
            canvas.line(px, top, px, bottom, grid);
            let label = format_tick(tx);
            canvas.text(
                px - text_width(&label) as isize / 2,
                bottom + 6,
                &label,
                fg,
            );
            tx += xstep;
        }
        let ystep = nice_step((y1 - y0) / 5.0);
        let mut ty = (y0 / ystep).ceil() * ystep;
        while ty <= y1 + 1e-12 {
            let (_, py) = to_px(x0, ty);
            canvas.line(left, py, right, py, grid);
            let label = format_tick(ty);
            canvas.text(
                left - 6 - text_width(&label) as isize,
                py - 3,
                &label,
                fg,
            );
            ty += ystep;
        }

        canvas.line(left, top, left, bottom, fg);
        canvas.line(left, bottom, right, bottom, fg);
        canvas.text(
            left + ((right - left) - text_width(&self.x_label) as isize) / 2,
            bottom + 20,
            &self.x_label,
            fg,
        );
        canvas.text(4, 8, &self.y_label, fg);

        for series in &self.series {
            let mut prev: Option<(isize, isize)> = None;
            for &(x, y) in &series.points {
                if !(x.is_finite() && y.is_finite()) {
                    prev = None;
                    continue;
                }
                let p = to_px(x, y);
                if let Some(q) = prev {
                    canvas.line(q.0, q.1, p.0, p.1, series.color);
                }
                // A small marker keeps single points visible.
                canvas.set(p.0, p.1 - 1, series.color);
                canvas.set(p.0, p.1 + 1, series.color);
                canvas.set(p.0 - 1, p.1, series.color);
                canvas.set(p.0 + 1, p.1, series.color);
                prev = Some(p);
            }
        }

        let mut ly = top + 6;
        for series in &self.series {
            let lx = right - 110;
            canvas.line(lx, ly + 3, lx + 14, ly + 3, series.color);
            canvas.text(lx + 18, ly, &series.label, fg);
            ly += 12;
        }

        Ok(canvas.into_image())
    }

    pub fn save_png(&self, path: &Path, width: usize, height: usize) -> Result<()> {
        let img = self.render(width, height)?;
        img.save(path).map_err(|e| Error::image(path, e))
    }
}
