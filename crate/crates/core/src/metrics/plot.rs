//! Self-contained raster renderer for histogram plots: axes, grouped bars
//! for the SR and HR series, numeric tick labels and a small legend, written
//! as lossless PNG. No UI toolkit involved.

use std::path::Path;

use crate::error::{CoreError, Result};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN_L: u32 = 56;
const MARGIN_R: u32 = 16;
const MARGIN_T: u32 = 36;
const MARGIN_B: u32 = 40;

const BG: [u8; 3] = [255, 255, 255];
const AXIS: [u8; 3] = [20, 20, 20];
const SR_COLOR: [u8; 3] = [52, 101, 196];
const HR_COLOR: [u8; 3] = [220, 120, 40];

/// 5x7 glyphs for the characters the plots need; each byte is one row,
/// low 5 bits used.
fn glyph(ch: char) -> [u8; 7] {
    match ch {
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
        'a' => [0x00, 0x00, 0x0e, 0x01, 0x0f, 0x11, 0x0f],
        'b' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x1e],
        'c' => [0x00, 0x00, 0x0e, 0x10, 0x10, 0x11, 0x0e],
        'e' => [0x00, 0x00, 0x0e, 0x11, 0x1f, 0x10, 0x0e],
        'g' => [0x00, 0x0f, 0x11, 0x0f, 0x01, 0x11, 0x0e],
        'h' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11],
        'i' => [0x04, 0x00, 0x0c, 0x04, 0x04, 0x04, 0x0e],
        'n' => [0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11],
        'o' => [0x00, 0x00, 0x0e, 0x11, 0x11, 0x11, 0x0e],
        'r' => [0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10],
        's' => [0x00, 0x00, 0x0f, 0x10, 0x0e, 0x01, 0x1e],
        't' => [0x08, 0x08, 0x1c, 0x08, 0x08, 0x09, 0x06],
        'u' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0d],
        ' ' => [0; 7],
        _ => [0x1f, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1f], // box for the rest
    }
}

struct Canvas {
    buf: image::RgbImage,
}

impl Canvas {
    fn new() -> Self {
        let mut buf = image::RgbImage::new(WIDTH, HEIGHT);
        for p in buf.pixels_mut() {
            p.0 = BG;
        }
        Canvas { buf }
    }

    fn set(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            self.buf.get_pixel_mut(x as u32, y as u32).0 = color;
        }
    }

    fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.set(x, y, color);
            }
        }
    }

    fn hline(&mut self, x0: i64, x1: i64, y: i64, color: [u8; 3]) {
        self.fill_rect(x0, y, x1, y, color);
    }

    fn vline(&mut self, x: i64, y0: i64, y1: i64, color: [u8; 3]) {
        self.fill_rect(x, y0, x, y1, color);
    }

    fn text(&mut self, x: i64, y: i64, s: &str, color: [u8; 3]) {
        let mut cx = x;
        for ch in s.chars() {
            let rows = glyph(ch);
            for (ry, row) in rows.iter().enumerate() {
                for bit in 0..5 {
                    if row & (1 << (4 - bit)) != 0 {
                        self.set(cx + bit as i64, y + ry as i64, color);
                    }
                }
            }
            cx += 6;
        }
    }
}

/// Render a two-series histogram (`bins = (lo, hi, count_sr, count_hr)`).
pub fn render_histogram(title: &str, bins: &[(f64, f64, u64, u64)], path: &Path) -> Result<()> {
    let mut c = Canvas::new();
    let plot_w = (WIDTH - MARGIN_L - MARGIN_R) as i64;
    let plot_h = (HEIGHT - MARGIN_T - MARGIN_B) as i64;
    let (x0, y0) = (MARGIN_L as i64, MARGIN_T as i64);
    let y_base = y0 + plot_h;

    let max_count = bins
        .iter()
        .map(|b| b.2.max(b.3))
        .max()
        .unwrap_or(0)
        .max(1) as f64;

    // bars: each bin gets two half-width bars side by side
    let n = bins.len().max(1) as i64;
    for (i, &(_, _, sr, hr)) in bins.iter().enumerate() {
        let bx0 = x0 + (i as i64) * plot_w / n;
        let bx1 = x0 + (i as i64 + 1) * plot_w / n;
        let mid = (bx0 + bx1) / 2;
        let sr_h = ((sr as f64 / max_count) * plot_h as f64).round() as i64;
        let hr_h = ((hr as f64 / max_count) * plot_h as f64).round() as i64;
        if sr_h > 0 {
            c.fill_rect(bx0, y_base - sr_h, (mid - 1).max(bx0), y_base - 1, SR_COLOR);
        }
        if hr_h > 0 {
            c.fill_rect(mid, y_base - hr_h, (bx1 - 1).max(mid), y_base - 1, HR_COLOR);
        }
    }

    // axes
    c.hline(x0, x0 + plot_w, y_base, AXIS);
    c.vline(x0, y0, y_base, AXIS);

    // x ticks at 0, 0.25, 0.5, 0.75, 1
    for k in 0..=4 {
        let tx = x0 + k * plot_w / 4;
        c.vline(tx, y_base, y_base + 4, AXIS);
        let label = format!("{:.2}", k as f64 / 4.0);
        c.text(tx - 12, y_base + 8, &label, AXIS);
    }
    // y ticks at 0, max/2, max
    for (frac, count) in [(0.0, 0.0), (0.5, max_count / 2.0), (1.0, max_count)] {
        let ty = y_base - (frac * plot_h as f64) as i64;
        c.hline(x0 - 4, x0, ty, AXIS);
        c.text(4, ty - 3, &format!("{:.0}", count), AXIS);
    }

    // title and legend
    c.text(x0, 10, title, AXIS);
    let lx = x0 + plot_w - 110;
    c.fill_rect(lx, 8, lx + 8, 16, SR_COLOR);
    c.text(lx + 12, 9, "sr", AXIS);
    c.fill_rect(lx + 40, 8, lx + 48, 16, HR_COLOR);
    c.text(lx + 52, 9, "hr", AXIS);

    c.buf.save(path).map_err(|e| CoreError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_a_decodable_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hist.png");
        let bins: Vec<(f64, f64, u64, u64)> = (0..64)
            .map(|i| {
                let lo = i as f64 / 64.0;
                (lo, lo + 1.0 / 64.0, (i % 7) as u64, (i % 5) as u64)
            })
            .collect();
        render_histogram("brightness", &bins, &path).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!(img.width(), WIDTH);
        assert_eq!(img.height(), HEIGHT);
    }
}
