//! Image quality metrics and the exploratory-statistics report.

pub mod plot;

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::imaging::Image;

/// Peak signal-to-noise ratio in dB. Identical images give `f64::INFINITY`,
/// which prints as `inf` in text outputs.
pub fn psnr(a: &Image, b: &Image, max_val: f64) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(CoreError::ShapeMismatch {
            op: "psnr",
            lhs: vec![3, a.height(), a.width()],
            rhs: vec![3, b.height(), b.width()],
        });
    }
    if max_val <= 0.0 {
        return Err(CoreError::InvalidArgument {
            op: "psnr",
            msg: format!("max_val must be positive, got {max_val}"),
        });
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.pixels().iter().zip(b.pixels()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    let mse = acc / a.pixels().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// Structural similarity over Gaussian-weighted local windows.
///
/// Statistics are computed per channel on every fully-interior window
/// (`size = window`, std `sigma`), and the score is the mean of the SSIM map
/// over positions and channels.
pub fn ssim(
    a: &Image,
    b: &Image,
    k1: f64,
    k2: f64,
    window: usize,
    sigma: f64,
    max_val: f64,
) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(CoreError::ShapeMismatch {
            op: "ssim",
            lhs: vec![3, a.height(), a.width()],
            rhs: vec![3, b.height(), b.width()],
        });
    }
    if a.width() < window || a.height() < window {
        return Err(CoreError::InvalidArgument {
            op: "ssim",
            msg: format!(
                "image {}x{} smaller than window {window}",
                a.width(),
                a.height()
            ),
        });
    }
    if window == 0 || sigma <= 0.0 || max_val <= 0.0 {
        return Err(CoreError::InvalidArgument {
            op: "ssim",
            msg: "window, sigma and max_val must be positive".into(),
        });
    }
    let c1 = (k1 * max_val) * (k1 * max_val);
    let c2 = (k2 * max_val) * (k2 * max_val);

    // normalized Gaussian taps
    let half = (window - 1) as f64 / 2.0;
    let mut kernel: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let ksum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= ksum;
    }

    let (w, h) = (a.width(), a.height());
    let (ow, oh) = (w - window + 1, h - window + 1);
    // separable valid-mode blur
    let blur = |plane: &[f64]| -> Vec<f64> {
        let mut horiz = vec![0.0f64; h * ow];
        for y in 0..h {
            for x in 0..ow {
                let mut acc = 0.0;
                for (i, &k) in kernel.iter().enumerate() {
                    acc += k * plane[y * w + x + i];
                }
                horiz[y * ow + x] = acc;
            }
        }
        let mut out = vec![0.0f64; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for (i, &k) in kernel.iter().enumerate() {
                    acc += k * horiz[(y + i) * ow + x];
                }
                out[y * ow + x] = acc;
            }
        }
        out
    };

    let mut total = 0.0f64;
    for c in 0..3 {
        let pa: Vec<f64> = a.plane(c).iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.plane(c).iter().map(|&v| v as f64).collect();
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();

        let mu_a = blur(&pa);
        let mu_b = blur(&pb);
        let e_aa = blur(&aa);
        let e_bb = blur(&bb);
        let e_ab = blur(&ab);

        for i in 0..oh * ow {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
        }
    }
    Ok(total / (3 * oh * ow) as f64)
}

/// SSIM with the standard constants: k1 = 0.01, k2 = 0.03, 11x11 window,
/// sigma 1.5, on unit-range images.
pub fn ssim_default(a: &Image, b: &Image) -> Result<f64> {
    ssim(a, b, 0.01, 0.03, 11, 1.5, 1.0)
}

/// Grayscale brightness mean and population standard deviation (contrast).
pub fn brightness_contrast(img: &Image) -> (f64, f64) {
    let n = (img.width() * img.height()) as f64;
    let r = img.plane(0);
    let g = img.plane(1);
    let b = img.plane(2);
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for i in 0..r.len() {
        let gray = 0.299 * r[i] as f64 + 0.587 * g[i] as f64 + 0.114 * b[i] as f64;
        sum += gray;
        sum_sq += gray * gray;
    }
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    (mean, var.sqrt())
}

/// One evaluation item: low-resolution input, super-resolved output and
/// high-resolution ground truth.
#[derive(Debug, Clone)]
pub struct ImageTriplet {
    pub id: String,
    pub lr: Image,
    pub sr: Image,
    pub hr: Image,
}

pub const HIST_BINS: usize = 64;

#[derive(Debug, Clone)]
pub struct HistogramPair {
    /// `(bin_low, bin_high, count_sr, count_hr)` over `[0, 1]`.
    pub bins: Vec<(f64, f64, u64, u64)>,
}

impl HistogramPair {
    fn build(sr_values: &[f64], hr_values: &[f64]) -> Self {
        let mut bins: Vec<(f64, f64, u64, u64)> = (0..HIST_BINS)
            .map(|i| {
                (
                    i as f64 / HIST_BINS as f64,
                    (i + 1) as f64 / HIST_BINS as f64,
                    0,
                    0,
                )
            })
            .collect();
        let index = |v: f64| ((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        for &v in sr_values {
            bins[index(v.clamp(0.0, 1.0))].2 += 1;
        }
        for &v in hr_values {
            bins[index(v.clamp(0.0, 1.0))].3 += 1;
        }
        HistogramPair { bins }
    }
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    /// `(id, psnr_db, ssim)` per triplet.
    pub rows: Vec<(String, f64, f64)>,
    pub mean_psnr: f64,
    pub median_psnr: f64,
    pub mean_ssim: f64,
    pub median_ssim: f64,
    pub brightness: HistogramPair,
    pub contrast: HistogramPair,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Compute SR-vs-HR quality metrics and brightness/contrast distributions,
/// writing `report.tsv`, the two histogram TSVs and their raster plots into
/// `out_dir`.
pub fn eda_report(triplets: &[ImageTriplet], out_dir: &Path) -> Result<MetricReport> {
    if triplets.is_empty() {
        return Err(CoreError::InvalidArgument {
            op: "eda_report",
            msg: "no triplets".into(),
        });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;

    let mut rows = Vec::with_capacity(triplets.len());
    let mut sr_brightness = Vec::new();
    let mut hr_brightness = Vec::new();
    let mut sr_contrast = Vec::new();
    let mut hr_contrast = Vec::new();
    for t in triplets {
        let p = psnr(&t.sr, &t.hr, 1.0)?;
        let s = ssim_default(&t.sr, &t.hr)?;
        rows.push((t.id.clone(), p, s));
        let (bm, bc) = brightness_contrast(&t.sr);
        sr_brightness.push(bm);
        sr_contrast.push(bc);
        let (hm, hc) = brightness_contrast(&t.hr);
        hr_brightness.push(hm);
        hr_contrast.push(hc);
    }
    // aggregate over a canonical order so permuting the input leaves every
    // aggregate bitwise unchanged
    rows.sort_by(|a, b| a.0.cmp(&b.0));

    let mut psnrs: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let mut ssims: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let mean_psnr = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
    let mean_ssim = ssims.iter().sum::<f64>() / ssims.len() as f64;
    psnrs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ssims.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let report = MetricReport {
        rows,
        mean_psnr,
        median_psnr: median(&psnrs),
        mean_ssim,
        median_ssim: median(&ssims),
        brightness: HistogramPair::build(&sr_brightness, &hr_brightness),
        contrast: HistogramPair::build(&sr_contrast, &hr_contrast),
    };

    let write = |name: &str, body: String| -> Result<()> {
        let path = out_dir.join(name);
        std::fs::write(&path, body).map_err(|e| CoreError::io(path.clone(), e))
    };

    let mut body = String::from("id\tpsnr_db\tssim\n");
    for (id, p, s) in &report.rows {
        body.push_str(&format!("{id}\t{p}\t{s}\n"));
    }
    write("report.tsv", body)?;

    for (name, hist) in [
        ("hist_brightness", &report.brightness),
        ("hist_contrast", &report.contrast),
    ] {
        let mut body = String::from("bin_low\tbin_high\tcount_sr\tcount_hr\n");
        for (lo, hi, sr, hr) in &hist.bins {
            body.push_str(&format!("{lo}\t{hi}\t{sr}\t{hr}\n"));
        }
        write(&format!("{name}.tsv"), body)?;
        plot::render_histogram(
            &name.replace('_', " "),
            &hist.bins,
            &out_dir.join(format!("{name}.png")),
        )?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = Rng::new(seed);
        Image::from_fn(w, h, |_, _, _| rng.uniform() as f32)
    }

    #[test]
    fn psnr_known_values() {
        let a = Image::constant(8, 8, [0.0, 0.0, 0.0]);
        let full = Image::constant(8, 8, [1.0, 1.0, 1.0]);
        // all-zero vs all-max: MSE = max^2 -> 0 dB
        assert_eq!(psnr(&a, &full, 1.0).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);

        // 0 vs 128 at max 255: 10 log10(255^2/128^2), through f32 storage
        let b = Image::constant(8, 8, [128.0 / 255.0; 3]);
        let got = psnr(&a, &b, 1.0).unwrap();
        let v = (128.0f32 / 255.0) as f64;
        let expect = 10.0 * (1.0 / (v * v)).log10();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        assert!((got - 5.987).abs() < 1e-3);

        let c = Image::constant(4, 8, [0.0; 3]);
        assert!(psnr(&a, &c, 1.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let base = random_image(32, 32, 1);
        let mut rng = Rng::new(2);
        let noisy = |sigma: f64, rng: &mut Rng| {
            let mut img = base.clone();
            for v in img.pixels_mut() {
                *v = (*v as f64 + sigma * rng.gaussian()).clamp(0.0, 1.0) as f32;
            }
            img
        };
        let p1 = psnr(&base, &noisy(0.01, &mut rng), 1.0).unwrap();
        let p2 = psnr(&base, &noisy(0.05, &mut rng), 1.0).unwrap();
        let p3 = psnr(&base, &noisy(0.1, &mut rng), 1.0).unwrap();
        assert!(p1 > p2 && p2 > p3, "{p1} {p2} {p3}");
    }

    #[test]
    fn ssim_self_similarity_is_exactly_one() {
        let img = random_image(16, 16, 3);
        assert_eq!(ssim_default(&img, &img).unwrap(), 1.0);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = random_image(16, 16, 4);
        let b = random_image(16, 16, 5);
        let ab = ssim_default(&a, &b).unwrap();
        let ba = ssim_default(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..1.0).contains(&ab));
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = Image::constant(16, 16, [0.2; 3]);
        let b = Image::constant(16, 16, [0.4; 3]);
        let c1 = 0.01f64 * 0.01;
        let expect = (2.0 * 0.2 * 0.4 + c1) / (0.2f64 * 0.2 + 0.4 * 0.4 + c1);
        let got = ssim_default(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = random_image(8, 8, 6);
        assert!(ssim_default(&a, &a).is_err());
    }

    #[test]
    fn brightness_contrast_known_values() {
        let gray = Image::constant(8, 8, [0.5; 3]);
        let (m, s) = brightness_contrast(&gray);
        assert!((m - 0.5).abs() < 1e-12);
        assert!(s.abs() < 1e-7, "std {s}");

        // half black, half white
        let half = Image::from_fn(8, 8, |_, y, _| if y < 4 { 0.0 } else { 1.0 });
        let (m, s) = brightness_contrast(&half);
        assert!((m - 0.5).abs() < 1e-9, "mean {m}");
        assert!((s - 0.5).abs() < 1e-9, "std {s}");
    }

    #[test]
    fn brightness_matches_direct_recomputation() {
        let img = random_image(9, 7, 7);
        let (m, s) = brightness_contrast(&img);
        let mut grays = Vec::new();
        for y in 0..7 {
            for x in 0..9 {
                grays.push(
                    0.299 * img.get(0, y, x) as f64
                        + 0.587 * img.get(1, y, x) as f64
                        + 0.114 * img.get(2, y, x) as f64,
                );
            }
        }
        let mean = grays.iter().sum::<f64>() / grays.len() as f64;
        let var = grays.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / grays.len() as f64;
        assert!((m - mean).abs() < 1e-12);
        assert!((s - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn eda_report_identical_sr_hr() {
        let dir = tempfile::tempdir().unwrap();
        let triplets: Vec<ImageTriplet> = (0..3)
            .map(|i| {
                let hr = random_image(16, 16, 100 + i);
                ImageTriplet {
                    id: format!("item{i}"),
                    lr: random_image(4, 4, 200 + i),
                    sr: hr.clone(),
                    hr,
                }
            })
            .collect();
        let report = eda_report(&triplets, dir.path()).unwrap();
        assert_eq!(report.mean_ssim, 1.0);
        assert!(report.rows.iter().all(|r| r.1 == f64::INFINITY));
        assert_eq!(report.mean_psnr, f64::INFINITY);
        let tsv = std::fs::read_to_string(dir.path().join("report.tsv")).unwrap();
        assert!(tsv.contains("inf"), "infinity sentinel must print as inf");
        assert!(dir.path().join("hist_brightness.tsv").exists());
        assert!(dir.path().join("hist_brightness.png").exists());
        assert!(dir.path().join("hist_contrast.png").exists());
        let total: u64 = report.brightness.bins.iter().map(|b| b.2).sum();
        assert_eq!(total, 3, "histogram counts sum to item count");
    }

    #[test]
    fn eda_single_triplet_aggregates_equal_row() {
        let dir = tempfile::tempdir().unwrap();
        let hr = random_image(16, 16, 50);
        let sr = random_image(16, 16, 51);
        let t = ImageTriplet {
            id: "only".into(),
            lr: random_image(4, 4, 52),
            sr,
            hr,
        };
        let report = eda_report(&[t], dir.path()).unwrap();
        assert_eq!(report.mean_psnr, report.rows[0].1);
        assert_eq!(report.median_psnr, report.rows[0].1);
        assert_eq!(report.mean_ssim, report.rows[0].2);
    }

    #[test]
    fn eda_order_invariant_aggregates() {
        let dir = tempfile::tempdir().unwrap();
        let make = |i: u64| ImageTriplet {
            id: format!("t{i}"),
            lr: random_image(4, 4, 300 + i),
            sr: random_image(16, 16, 400 + i),
            hr: random_image(16, 16, 500 + i),
        };
        let fwd: Vec<_> = (0..5).map(make).collect();
        let mut rev = fwd.clone();
        rev.reverse();
        let a = eda_report(&fwd, dir.path()).unwrap();
        let b = eda_report(&rev, dir.path()).unwrap();
        assert_eq!(a.mean_psnr, b.mean_psnr);
        assert_eq!(a.median_ssim, b.median_ssim);
        let ta: Vec<u64> = a.brightness.bins.iter().map(|x| x.2).collect();
        let tb: Vec<u64> = b.brightness.bins.iter().map(|x| x.2).collect();
        assert_eq!(ta, tb);
    }
}
