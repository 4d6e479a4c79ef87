//! Green annotation-block detection and removal.
//!
//! Some raw corpus images carry a saturated green UI block in the bottom-left
//! corner. Detection thresholds in HSV space, takes the largest connected
//! component, and only reports a block whose area is at least 0.5% of the
//! image with its centroid in the bottom-left quadrant. Removal crops to the
//! largest axis-aligned rectangle disjoint from the block rather than
//! inpainting fabricated tissue.

use crate::imaging::Image;

/// HSV thresholds; hue in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreenThresholds {
    pub hue_lo: f32,
    pub hue_hi: f32,
    pub sat_min: f32,
    pub val_min: f32,
}

impl Default for GreenThresholds {
    fn default() -> Self {
        // covers saturated UI green
        GreenThresholds {
            hue_lo: 90.0,
            hue_hi: 150.0,
            sat_min: 0.4,
            val_min: 0.2,
        }
    }
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

#[derive(Debug, Clone)]
pub struct GreenBlock {
    pub bbox: Rect,
    pub area: usize,
    pub mask: Vec<bool>,
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

/// Detect the annotation block, if any.
pub fn detect_green_block(img: &Image, th: &GreenThresholds) -> Option<GreenBlock> {
    let (w, h) = (img.width(), img.height());
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let (hue, sat, val) =
                rgb_to_hsv(img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
            mask[y * w + x] =
                hue >= th.hue_lo && hue <= th.hue_hi && sat >= th.sat_min && val >= th.val_min;
        }
    }

    // largest 4-connected component
    let mut visited = vec![false; w * h];
    let mut best: Option<(usize, Rect, (f64, f64), Vec<usize>)> = None;
    for start in 0..w * h {
        if !mask[start] || visited[start] {
            continue;
        }
        let mut stack = vec![start];
        visited[start] = true;
        let mut cells = Vec::new();
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
        let (mut cx, mut cy) = (0f64, 0f64);
        while let Some(i) = stack.pop() {
            cells.push(i);
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            cx += x as f64;
            cy += y as f64;
            let mut push = |j: usize| {
                if mask[j] && !visited[j] {
                    visited[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        let area = cells.len();
        if best.as_ref().is_none_or(|(a, ..)| area > *a) {
            let centroid = (cx / area as f64, cy / area as f64);
            best = Some((area, Rect { x0, y0, x1, y1 }, centroid, cells));
        }
    }

    let (area, bbox, (cx, cy), cells) = best?;
    if (area as f64) < 0.005 * (w * h) as f64 {
        return None;
    }
    // bottom-left quadrant: x below the horizontal midpoint, y at or below
    // the vertical midpoint (rows grow downward)
    if cx >= w as f64 / 2.0 || cy < h as f64 / 2.0 {
        return None;
    }
    let mut block_mask = vec![false; w * h];
    for i in cells {
        block_mask[i] = true;
    }
    Some(GreenBlock {
        bbox,
        area,
        mask: block_mask,
    })
}

/// Outcome of annotation cleanup.
#[derive(Debug, Clone)]
pub enum CleanOutcome {
    /// No block found; the image is unchanged.
    Kept(Image),
    /// Block removed by cropping to the stated rectangle.
    Cropped(Image, Rect),
    /// The largest block-free rectangle keeps less than 60% of the area.
    Rejected,
}

/// Remove a detected block by cropping to the largest axis-aligned rectangle
/// disjoint from its bounding box.
pub fn clean_image(img: &Image, th: &GreenThresholds) -> CleanOutcome {
    let Some(block) = detect_green_block(img, th) else {
        return CleanOutcome::Kept(img.clone());
    };
    let (w, h) = (img.width(), img.height());
    let b = block.bbox;
    // candidate rectangles: above / below / left / right of the bbox
    let candidates = [
        (b.y0 > 0).then(|| Rect {
            x0: 0,
            y0: 0,
            x1: w - 1,
            y1: b.y0 - 1,
        }),
        (b.y1 + 1 < h).then(|| Rect {
            x0: 0,
            y0: b.y1 + 1,
            x1: w - 1,
            y1: h - 1,
        }),
        (b.x0 > 0).then(|| Rect {
            x0: 0,
            y0: 0,
            x1: b.x0 - 1,
            y1: h - 1,
        }),
        (b.x1 + 1 < w).then(|| Rect {
            x0: b.x1 + 1,
            y0: 0,
            x1: w - 1,
            y1: h - 1,
        }),
    ];
    let best = candidates
        .into_iter()
        .flatten()
        .max_by_key(|r| r.width() * r.height());
    let Some(rect) = best else {
        return CleanOutcome::Rejected;
    };
    let kept_area = rect.width() * rect.height();
    if (kept_area as f64) < 0.6 * (w * h) as f64 {
        return CleanOutcome::Rejected;
    }
    let cropped = img
        .crop(rect.x0, rect.y0, rect.width(), rect.height())
        .expect("candidate rectangles lie inside the image");
    CleanOutcome::Cropped(cropped, rect)
}
