//! Static bar charts written as PNG files.
//!
//! Text is drawn with a built-in 3×5 pixel font (digits, upper-case letters
//! and a little punctuation; lower-case input is upper-cased), so the output
//! depends on nothing but the data and is byte-reproducible.

use std::path::Path;

use image::{DynamicImage, Rgb, RgbImage};

use crate::archive::write_atomic;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BarChart {
    pub title: String,
    pub labels: Vec<String>,
    pub values: Vec<f64>,
    /// Top of the value axis; bars are clipped to `[0, y_max]`.
    pub y_max: f64,
}

const SCALE: u32 = 2;
const BAR_W: u32 = 28;
const GAP: u32 = 16;
const PLOT_H: u32 = 160;
const MARGIN: u32 = 24;
const PALETTE: [[u8; 3]; 6] = [
    [52, 101, 164],
    [204, 0, 0],
    [78, 154, 6],
    [245, 121, 0],
    [117, 80, 123],
    [193, 125, 17],
];

fn glyph(c: char) -> u16 {
    let rows: [u8; 5] = match c.to_ascii_uppercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        'A' => [2, 5, 7, 5, 5],
        'B' => [6, 5, 6, 5, 6],
        'C' => [3, 4, 4, 4, 3],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'F' => [7, 4, 6, 4, 4],
        'G' => [3, 4, 5, 5, 3],
        'H' => [5, 5, 7, 5, 5],
        'I' => [7, 2, 2, 2, 7],
        'J' => [1, 1, 1, 5, 2],
        'K' => [5, 5, 6, 5, 5],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'N' => [6, 5, 5, 5, 5],
        'O' => [2, 5, 5, 5, 2],
        'P' => [6, 5, 6, 4, 4],
        'Q' => [2, 5, 5, 6, 3],
        'R' => [6, 5, 6, 5, 5],
        'S' => [3, 4, 2, 1, 6],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        'V' => [5, 5, 5, 5, 2],
        'W' => [5, 5, 7, 7, 5],
        'X' => [5, 5, 2, 5, 5],
        'Y' => [5, 5, 2, 2, 2],
        'Z' => [7, 1, 2, 4, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        ':' => [0, 2, 0, 2, 0],
        '%' => [5, 1, 2, 4, 5],
        '_' => [0, 0, 0, 0, 7],
        '/' => [1, 1, 2, 4, 4],
        '=' => [0, 7, 0, 7, 0],
        _ => [0; 5],
    };
    rows.iter().fold(0u16, |acc, r| (acc << 3) | *r as u16)
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

/// Draws `text` with its top-left corner at `(x, y)`.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: [u8; 3]) {
    for (i, ch) in text.chars().enumerate() {
        let bits = glyph(ch);
        let ox = x + (i as i64) * 4 * SCALE as i64;
        for row in 0..5 {
            for col in 0..3 {
                if bits >> (14 - (row * 3 + col)) & 1 == 1 {
                    for sy in 0..SCALE as i64 {
                        for sx in 0..SCALE as i64 {
                            put(img, ox + col as i64 * SCALE as i64 + sx, y + row as i64 * SCALE as i64 + sy, color);
                        }
                    }
                }
            }
        }
    }
}

pub fn text_width(text: &str) -> u32 {
    text.chars().count() as u32 * 4 * SCALE
}

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: [u8; 3]) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, Rgb(color));
        }
    }
}

pub fn render_bar_chart(chart: &BarChart) -> Result<RgbImage> {
    if chart.labels.len() != chart.values.len() {
        return Err(Error::shape("bar chart labels", chart.values.len(), chart.labels.len()));
    }
    if chart.values.is_empty() {
        return Err(Error::EmptyInput("bar chart has no bars".into()));
    }
    if !(chart.y_max > 0.0) || chart.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("bar chart values must be finite with y_max > 0".into()));
    }
    let n = chart.values.len() as u32;
    let label_chars = 6;
    let slot = BAR_W.max(text_width(&"0".repeat(label_chars))) + GAP;
    let plot_w = n * slot;
    let width = (2 * MARGIN + plot_w).max(2 * MARGIN + text_width(&chart.title));
    let top = MARGIN + 8 * SCALE + 6 * SCALE;
    let height = top + PLOT_H + 8 * SCALE * 2 + MARGIN;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    draw_text(&mut img, MARGIN as i64, MARGIN as i64 / 2, &chart.title, [0, 0, 0]);
    // gridlines at quarters of the axis
    for q in 0..=4 {
        let y = top + PLOT_H - q * PLOT_H / 4;
        fill(&mut img, MARGIN, y, MARGIN + plot_w, y + 1, [210, 210, 210]);
    }
    fill(&mut img, MARGIN, top, MARGIN + 1, top + PLOT_H + 1, [0, 0, 0]);
    for (i, (label, v)) in chart.labels.iter().zip(&chart.values).enumerate() {
        let i = i as u32;
        let frac = (v / chart.y_max).clamp(0.0, 1.0);
        let bar_h = (frac * PLOT_H as f64).round() as u32;
        let x0 = MARGIN + GAP / 2 + i * slot + (slot - GAP - BAR_W) / 2;
        let color = PALETTE[i as usize % PALETTE.len()];
        fill(&mut img, x0, top + PLOT_H - bar_h, x0 + BAR_W, top + PLOT_H, color);
        let value = format!("{:.2}", v);
        let vx = x0 as i64 + BAR_W as i64 / 2 - text_width(&value) as i64 / 2;
        draw_text(&mut img, vx, (top + PLOT_H - bar_h) as i64 - 6 * SCALE as i64 - 2, &value, [0, 0, 0]);
        let short: String = label.chars().take(label_chars).collect();
        let lx = x0 as i64 + BAR_W as i64 / 2 - text_width(&short) as i64 / 2;
        draw_text(&mut img, lx, (top + PLOT_H + 4) as i64, &short, [0, 0, 0]);
    }
    Ok(img)
}

pub fn save_bar_chart(path: &Path, chart: &BarChart) -> Result<()> {
    let img = render_bar_chart(chart)?;
    let mut buf = std::io::Cursor::new(Vec::new());
    DynamicImage::ImageRgb8(img)
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::Codec(e.to_string()))?;
    write_atomic(path, buf.get_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chart() -> BarChart {
        BarChart {
            title: "ASR cnn-b".into(),
            labels: vec!["none".into(), "jpeg:75".into()],
            values: vec![0.8, 0.25],
            y_max: 1.0,
        }
    }

    #[test]
    fn bars_scale_with_values() {
        let img = render_bar_chart(&chart()).unwrap();
        let count = |color: [u8; 3]| img.pixels().filter(|p| p.0 == color).count();
        let (a, b) = (count(PALETTE[0]), count(PALETTE[1]));
        assert!(a > 0 && b > 0);
        let ratio = a as f64 / b as f64;
        assert!((ratio - 0.8 / 0.25).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn rendering_is_deterministic_and_validated() {
        let a = render_bar_chart(&chart()).unwrap();
        let b = render_bar_chart(&chart()).unwrap();
        assert_eq!(a.as_raw(), b.as_raw());
        let mut bad = chart();
        bad.values.pop();
        assert!(render_bar_chart(&bad).is_err());
        bad.labels.clear();
        bad.values.clear();
        assert!(render_bar_chart(&bad).is_err());
    }

    #[test]
    fn glyphs_have_ink() {
        for c in "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ.-:%_/=".chars() {
            assert_ne!(glyph(c), 0, "{c}");
        }
        assert_eq!(glyph(' '), 0);
    }
}
