//! Separable cubic-convolution resampling.
//!
//! Catmull-Rom kernel (`a = -0.5`), half-pixel-centered coordinate mapping
//! and edge-clamped taps. Downscaling widens the kernel support by the scale
//! ratio (anti-aliasing); tap weights are renormalized so constants are
//! reproduced exactly.

use crate::error::Result;
use crate::imaging::Image;

/// Keys cubic kernel with a = -0.5, support [-2, 2].
pub fn catmull_rom(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t < 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Tap positions and normalized weights for one output coordinate.
fn taps(out_i: usize, in_len: usize, out_len: usize) -> (i64, Vec<f64>) {
    let ratio = in_len as f64 / out_len as f64;
    let filter_scale = ratio.max(1.0);
    let support = 2.0 * filter_scale;
    let center = (out_i as f64 + 0.5) * ratio - 0.5;
    let lo = (center - support).ceil() as i64;
    let hi = (center + support).floor() as i64;
    let mut weights = Vec::with_capacity((hi - lo + 1) as usize);
    let mut sum = 0.0;
    for j in lo..=hi {
        let w = catmull_rom((j as f64 - center) / filter_scale);
        weights.push(w);
        sum += w;
    }
    for w in &mut weights {
        *w /= sum;
    }
    (lo, weights)
}

fn resample_axis(data: &[f32], in_len: usize, lines: usize, plan: &[(i64, Vec<f64>)]) -> Vec<f32> {
    // data is [lines][in_len]; output [lines][plan.len()]
    let out_len = plan.len();
    let mut out = vec![0.0f32; lines * out_len];
    for line in 0..lines {
        let src = &data[line * in_len..(line + 1) * in_len];
        let dst = &mut out[line * out_len..(line + 1) * out_len];
        for (i, (lo, weights)) in plan.iter().enumerate() {
            let mut acc = 0.0f64;
            for (k, &w) in weights.iter().enumerate() {
                let j = (lo + k as i64).clamp(0, in_len as i64 - 1) as usize;
                acc += w * src[j] as f64;
            }
            dst[i] = acc as f32;
        }
    }
    out
}

/// Resize to `out_w x out_h` (horizontal pass, then vertical).
pub fn bicubic_resize(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(crate::error::CoreError::InvalidArgument {
            op: "bicubic_resize",
            msg: "output dims must be >= 1".into(),
        });
    }
    let (w, h) = (img.width(), img.height());
    let plan_x: Vec<(i64, Vec<f64>)> = (0..out_w).map(|i| taps(i, w, out_w)).collect();
    let plan_y: Vec<(i64, Vec<f64>)> = (0..out_h).map(|i| taps(i, h, out_h)).collect();

    let mut out = Image::constant(out_w, out_h, [0.0; 3]);
    for c in 0..3 {
        // horizontal: rows of length w -> out_w
        let horiz = resample_axis(img.plane(c), w, h, &plan_x);
        // transpose to columns, resample, transpose back
        let mut cols = vec![0.0f32; out_w * h];
        for y in 0..h {
            for x in 0..out_w {
                cols[x * h + y] = horiz[y * out_w + x];
            }
        }
        let vert = resample_axis(&cols, h, out_w, &plan_y);
        for x in 0..out_w {
            for y in 0..out_h {
                out.set(c, y, x, vert[x * out_h + y]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Independent direct two-pass implementation: per output pixel, gather
    /// and normalize on the fly, no precomputed plans.
    fn oracle_resize(img: &Image, out_w: usize, out_h: usize) -> Image {
        let gather = |src: &dyn Fn(i64) -> f64, in_len: usize, out_len: usize, i: usize| -> f64 {
            let ratio = in_len as f64 / out_len as f64;
            let fs = ratio.max(1.0);
            let center = (i as f64 + 0.5) * ratio - 0.5;
            let lo = (center - 2.0 * fs).ceil() as i64;
            let hi = (center + 2.0 * fs).floor() as i64;
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for j in lo..=hi {
                let w = catmull_rom((j as f64 - center) / fs);
                acc += w * src(j.clamp(0, in_len as i64 - 1));
                wsum += w;
            }
            acc / wsum
        };
        let (w, h) = (img.width(), img.height());
        let mut mid = vec![0.0f64; 3 * h * out_w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..out_w {
                    let src = |j: i64| img.get(c, y, j as usize) as f64;
                    mid[(c * h + y) * out_w + x] = gather(&src, w, out_w, x);
                }
            }
        }
        Image::from_fn(out_w, out_h, |c, y, x| {
            let src = |j: i64| mid[(c * h + j as usize) * out_w + x];
            gather(&src, h, out_h, y) as f32
        })
    }

    #[test]
    fn constant_image_any_resize() {
        let img = Image::constant(13, 7, [0.3, 0.6, 0.9]);
        for (w, h) in [(13, 7), (26, 14), (5, 3), (64, 64), (1, 1)] {
            let out = bicubic_resize(&img, w, h).unwrap();
            for c in 0..3 {
                for &v in out.plane(c) {
                    assert!(
                        (v - img.get(c, 0, 0)).abs() < 1e-6,
                        "{w}x{h} channel {c}: {v}"
                    );
                }
            }
        }
    }

    #[test]
    fn same_size_resize_is_identity() {
        let mut rng = Rng::new(1);
        let img = Image::from_fn(11, 9, |_, _, _| rng.uniform() as f32);
        let out = bicubic_resize(&img, 11, 9).unwrap();
        for (a, b) in out.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_ramp_reproduced_on_upscale() {
        let w = 16usize;
        let img = Image::from_fn(w, 8, |_, _, x| x as f32 / (w - 1) as f32);
        let out = bicubic_resize(&img, 2 * w, 16).unwrap();
        // interior columns follow the same linear map of the half-pixel grid
        let ramp = |x: usize| -> f64 {
            // source coordinate of output column x
            let sx = (x as f64 + 0.5) * 0.5 - 0.5;
            sx / (w - 1) as f64
        };
        for x in 4..(2 * w - 4) {
            let expect = ramp(x) as f32;
            for y in 0..16 {
                let got = out.get(0, y, x);
                assert!(
                    (got - expect).abs() < 1e-6,
                    "col {x} row {y}: {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn upscale_matches_independent_oracle() {
        let mut rng = Rng::new(2);
        let img = Image::from_fn(16, 16, |_, _, _| rng.uniform() as f32);
        let got = bicubic_resize(&img, 64, 64).unwrap();
        let expect = oracle_resize(&img, 64, 64);
        for (a, b) in got.pixels().iter().zip(expect.pixels()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn antialiased_downscale_matches_independent_oracle() {
        let mut rng = Rng::new(3);
        let img = Image::from_fn(64, 48, |_, y, x| {
            ((x as f32 * 0.7).sin() * (y as f32 * 0.9).cos() * 0.5 + 0.5 + rng.uniform() as f32)
                / 2.0
        });
        let got = bicubic_resize(&img, 8, 6).unwrap();
        let expect = oracle_resize(&img, 8, 6);
        for (a, b) in got.pixels().iter().zip(expect.pixels()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn kernel_properties() {
        assert_eq!(catmull_rom(0.0), 1.0);
        assert_eq!(catmull_rom(1.0), 0.0);
        assert_eq!(catmull_rom(2.0), 0.0);
        assert_eq!(catmull_rom(2.5), 0.0);
        assert!(catmull_rom(0.5) > 0.0);
        assert!(catmull_rom(1.5) < 0.0, "cubic lobe is negative");
        assert_eq!(catmull_rom(-0.5), catmull_rom(0.5));
    }

    #[test]
    fn rejects_zero_output() {
        let img = Image::constant(4, 4, [0.5; 3]);
        assert!(bicubic_resize(&img, 0, 4).is_err());
    }
}
