//! Minimal PNG bar charts for evaluation reports.
//!
//! Text is rendered with an embedded 5×7 bitmap font so charts need no
//! external font files; lowercase input is drawn as uppercase and unknown
//! characters as blanks. Output bytes are deterministic for fixed input.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const GLYPH_W: u32 = 5;
const GLYPH_H: u32 = 7;
/// Horizontal advance per character (glyph plus 1px gap).
const ADVANCE: u32 = GLYPH_W + 1;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([20, 20, 20]);
const GRID: Rgb<u8> = Rgb([210, 210, 210]);
const BAR: Rgb<u8> = Rgb([70, 110, 180]);

/// Rows of a 5×7 glyph, most significant of the low 5 bits leftmost.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
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
        'N' => [0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001, 0b10001],
        'O' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'P' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000],
        'Q' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101],
        'R' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001],
        'S' => [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110],
        'T' => [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
        'U' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'V' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100],
        'W' => [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b11011, 0b10001],
        'X' => [0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b01010, 0b10001],
        'Y' => [0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
        'Z' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111],
        '0' => [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        '1' => [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        '2' => [0b01110, 0b10001, 0b00001, 0b00110, 0b01000, 0b10000, 0b11111],
        '3' => [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
        '4' => [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        '5' => [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        '6' => [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        '7' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        '8' => [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        '9' => [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
        '.' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b00100],
        ',' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b00100, 0b01000],
        ':' => [0b00000, 0b00100, 0b00000, 0b00000, 0b00000, 0b00100, 0b00000],
        '-' => [0b00000, 0b00000, 0b00000, 0b01110, 0b00000, 0b00000, 0b00000],
        '_' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b11111],
        '(' => [0b00010, 0b00100, 0b01000, 0b01000, 0b01000, 0b00100, 0b00010],
        ')' => [0b01000, 0b00100, 0b00010, 0b00010, 0b00010, 0b00100, 0b01000],
        '/' => [0b00001, 0b00010, 0b00010, 0b00100, 0b01000, 0b01000, 0b10000],
        '%' => [0b11001, 0b11010, 0b00010, 0b00100, 0b01000, 0b01011, 0b10011],
        _ => [0; 7],
    }
}

/// Pixel width of `text` at `scale`.
pub fn text_width(text: &str, scale: u32) -> u32 {
    text.chars().count() as u32 * ADVANCE * scale
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, scale: u32, color: Rgb<u8>) {
    let mut cx = x;
    for c in text.chars() {
        let rows = glyph(c);
        for (gy, row) in rows.iter().enumerate() {
            for gx in 0..GLYPH_W {
                if row & (1 << (GLYPH_W - 1 - gx)) != 0 {
                    fill_rect(
                        img,
                        cx + gx * scale,
                        y + gy as u32 * scale,
                        scale,
                        scale,
                        color,
                    );
                }
            }
        }
        cx += ADVANCE * scale;
    }
}

fn fill_rect(img: &mut RgbImage, x: u32, y: u32, w: u32, h: u32, color: Rgb<u8>) {
    for py in y..(y + h).min(img.height()) {
        for px in x..(x + w).min(img.width()) {
            img.put_pixel(px, py, color);
        }
    }
}

fn hline(img: &mut RgbImage, x0: u32, x1: u32, y: u32, color: Rgb<u8>) {
    fill_rect(img, x0, y, x1.saturating_sub(x0) + 1, 1, color);
}

fn vline(img: &mut RgbImage, x: u32, y0: u32, y1: u32, color: Rgb<u8>) {
    fill_rect(img, x, y0, 1, y1.saturating_sub(y0) + 1, color);
}

/// Render a bar chart of named values in `[0, 1]` and save it as a PNG.
///
/// Bars are labelled beneath the axis and annotated with their value to
/// two decimals; gridlines mark quarters. Fails on empty input or values
/// outside the unit interval.
pub fn save_bar_chart(path: &Path, title: &str, bars: &[(String, f64)]) -> Result<()> {
    if bars.is_empty() {
        return Err(Error::Config("bar chart needs at least one bar".into()));
    }
    for (name, v) in bars {
        if !v.is_finite() || !(0.0..=1.0).contains(v) {
            return Err(Error::Config(format!(
                "bar {name:?} value {v} outside [0, 1]"
            )));
        }
    }

    let plot_h: u32 = 160;
    let top: u32 = 16 + GLYPH_H * 2 + 10;
    let left: u32 = text_width("0.00", 1) + 12;
    let bottom: u32 = GLYPH_H + 14;
    let right: u32 = 12;
    let max_label = bars.iter().map(|(n, _)| text_width(n, 1)).max().unwrap_or(0);
    let slot = (max_label + 12).max(34);
    let width = (left + slot * bars.len() as u32 + right).max(text_width(title, 2) + 32);
    let height = top + plot_h + bottom;

    let mut img = RgbImage::from_pixel(width, height, WHITE);
    draw_text(&mut img, 16, 12, title, 2, BLACK);

    let axis_y = top + plot_h;
    // Quarter gridlines with tick labels, top (1.00) to bottom (0.00).
    for q in 0..=4u32 {
        let y = top + plot_h * q / 4;
        let value = 1.0 - q as f64 / 4.0;
        if q > 0 && q < 4 {
            hline(&mut img, left, width - right, y, GRID);
        }
        draw_text(&mut img, 4, y.saturating_sub(GLYPH_H / 2), &format!("{value:.2}"), 1, BLACK);
    }
    hline(&mut img, left, width - right, axis_y, BLACK);
    vline(&mut img, left, top, axis_y, BLACK);

    for (i, (name, v)) in bars.iter().enumerate() {
        let x0 = left + slot * i as u32;
        let bar_w = slot - 12;
        let bar_x = x0 + (slot - bar_w) / 2;
        let bar_h = (*v * plot_h as f64).round() as u32;
        fill_rect(&mut img, bar_x, axis_y - bar_h, bar_w, bar_h, BAR);
        let value_text = format!("{v:.2}");
        let vx = x0 + (slot.saturating_sub(text_width(&value_text, 1))) / 2;
        let vy = (axis_y - bar_h).saturating_sub(GLYPH_H + 2).max(top.saturating_sub(GLYPH_H));
        draw_text(&mut img, vx, vy, &value_text, 1, BLACK);
        let lx = x0 + (slot.saturating_sub(text_width(name, 1))) / 2;
        draw_text(&mut img, lx, axis_y + 6, name, 1, BLACK);
    }

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    img.save(path).map_err(|e| Error::format(path, format!("png encode failed: {e}")))
}
