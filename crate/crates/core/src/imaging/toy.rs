//! Synthetic desk-scale corpus: smooth random images that stand in for the
//! real endoscopy data. Each image is a sum of 3-6 random-frequency 2-D
//! sinusoids plus 1-3 soft-edged ellipses (mucosa plus lesion structure),
//! tinted per channel and clamped to the unit interval.

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::imaging::{write_manifest, Image, ManifestEntry};
use crate::rng::Rng;

struct Sinusoid {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    amp: f64,
    soft_px: f64,
}

/// Deterministic generator for one image.
pub fn toy_image(size: usize, rng: &mut Rng) -> Image {
    let n_sin = 3 + rng.index(4); // 3..=6
    let sins: Vec<Sinusoid> = (0..n_sin)
        .map(|_| Sinusoid {
            fx: 0.5 + 2.5 * rng.uniform(),
            fy: 0.5 + 2.5 * rng.uniform(),
            phase: 2.0 * std::f64::consts::PI * rng.uniform(),
            amp: 0.05 + 0.07 * rng.uniform(),
        })
        .collect();
    let n_ell = 1 + rng.index(3); // 1..=3
    let ells: Vec<Ellipse> = (0..n_ell)
        .map(|_| Ellipse {
            cx: (0.2 + 0.6 * rng.uniform()) * size as f64,
            cy: (0.2 + 0.6 * rng.uniform()) * size as f64,
            rx: (0.12 + 0.18 * rng.uniform()) * size as f64,
            ry: (0.12 + 0.18 * rng.uniform()) * size as f64,
            amp: (0.08 + 0.12 * rng.uniform()) * if rng.uniform() < 0.5 { -1.0 } else { 1.0 },
            soft_px: 1.5 + 1.5 * rng.uniform(),
        })
        .collect();

    let two_pi = 2.0 * std::f64::consts::PI;
    let field = |x: usize, y: usize| -> f64 {
        let (xf, yf) = (x as f64, y as f64);
        let mut v = 0.0;
        for s in &sins {
            v += s.amp * (two_pi * (s.fx * xf + s.fy * yf) / size as f64 + s.phase).sin();
        }
        for e in &ells {
            let dx = (xf - e.cx) / e.rx;
            let dy = (yf - e.cy) / e.ry;
            let d = (dx * dx + dy * dy).sqrt();
            let t = (1.0 - d) * e.rx.min(e.ry) / e.soft_px;
            v += e.amp / (1.0 + (-t).exp());
        }
        v
    };

    // mucosa-like tint; grayscale mean sits near 0.48 before the field
    const BASE: [f64; 3] = [0.55, 0.46, 0.40];
    const GAIN: [f64; 3] = [1.0, 0.95, 0.85];
    let mut img = Image::constant(size, size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            let f = field(x, y);
            for c in 0..3 {
                img.set(c, y, x, (BASE[c] + GAIN[c] * f).clamp(0.0, 1.0) as f32);
            }
        }
    }
    img
}

/// Generate `n` images at `hr_size`, write them as a normal corpus under
/// `root` (train/val split, manifest), deterministically per seed. Roughly
/// one in twenty items lands in the validation split, at least one always.
pub fn synth_toy_dataset(root: &Path, n: usize, hr_size: usize, rng: &mut Rng) -> Result<()> {
    if n < 1 {
        return Err(CoreError::InvalidArgument {
            op: "synth_toy_dataset",
            msg: "need n >= 1".into(),
        });
    }
    let val_count = (n / 20).max(1).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let val_set: std::collections::BTreeSet<usize> =
        order.iter().take(val_count).copied().collect();

    for split in ["train", "val"] {
        let dir = root.join(split);
        std::fs::create_dir_all(&dir).map_err(|e| CoreError::io(dir.clone(), e))?;
    }
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let img = toy_image(hr_size, rng);
        let id = format!("toy{i:05}");
        let split = if val_set.contains(&i) { "val" } else { "train" };
        let path = root.join(split).join(format!("{id}.png"));
        img.save(&path)?;
        entries.push(ManifestEntry {
            id,
            label: "toy".into(),
            orig_width: hr_size,
            orig_height: hr_size,
            cleaned: false,
        });
    }
    write_manifest(root, &entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{DatasetHandle, Split};
    use crate::metrics::brightness_contrast;

    #[test]
    fn values_stay_in_unit_interval() {
        let mut rng = Rng::new(1);
        for _ in 0..5 {
            let img = toy_image(24, &mut rng);
            assert!(img.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn mean_brightness_within_band() {
        let mut rng = Rng::new(2);
        let mut acc = 0.0;
        let n = 1000;
        for _ in 0..n {
            let img = toy_image(16, &mut rng);
            acc += brightness_contrast(&img).0;
        }
        let mean = acc / n as f64;
        assert!((0.4..=0.6).contains(&mean), "mean brightness {mean}");
    }

    #[test]
    fn same_seed_identical_dataset_bytes() {
        let walk = |root: &Path| -> Vec<(String, Vec<u8>)> {
            let mut files = Vec::new();
            for split in ["train", "val"] {
                let dir = root.join(split);
                let mut names: Vec<_> = std::fs::read_dir(&dir)
                    .unwrap()
                    .map(|e| e.unwrap().path())
                    .collect();
                names.sort();
                for p in names {
                    files.push((
                        format!("{split}/{}", p.file_name().unwrap().to_string_lossy()),
                        std::fs::read(&p).unwrap(),
                    ));
                }
            }
            files.push((
                "manifest".into(),
                std::fs::read(root.join("manifest.tsv")).unwrap(),
            ));
            files
        };
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        synth_toy_dataset(da.path(), 25, 16, &mut Rng::new(7)).unwrap();
        synth_toy_dataset(db.path(), 25, 16, &mut Rng::new(7)).unwrap();
        assert_eq!(walk(da.path()), walk(db.path()));
    }

    #[test]
    fn corpus_opens_through_dataset_handle() {
        let dir = tempfile::tempdir().unwrap();
        synth_toy_dataset(dir.path(), 30, 32, &mut Rng::new(3)).unwrap();
        let train = DatasetHandle::open(dir.path(), Split::Train, 32, 4).unwrap();
        let val = DatasetHandle::open(dir.path(), Split::Val, 32, 4).unwrap();
        assert_eq!(train.len() + val.len(), 30);
        assert!(!val.is_empty());
        let pair = train.load_pair(&train.ids()[0]).unwrap();
        assert_eq!(pair.lr.width(), 8);
        assert_eq!(pair.hr.width(), 32);
    }
}
