//! Image I/O, dataset preparation and LR/HR pair construction.
//!
//! Working form is planar RGB `f32` in `[0, 1]`; storage form is 8-bit. The
//! corpus layout is `root/{train,val}/<id>.png` plus `root/manifest.tsv`.

pub mod bicubic;
pub mod green;
pub mod toy;

use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

pub use bicubic::bicubic_resize;
pub use green::{clean_image, detect_green_block, CleanOutcome, GreenBlock, GreenThresholds};
pub use toy::{synth_toy_dataset, toy_image};

/// Planar RGB image, unit-interval values.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>, // [3][height][width]
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != 3 * width * height {
            return Err(CoreError::InvalidArgument {
                op: "image",
                msg: format!(
                    "bad dimensions {width}x{height} for {} values",
                    pixels.len()
                ),
            });
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn constant(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut pixels = Vec::with_capacity(3 * width * height);
        for c in rgb {
            pixels.extend(std::iter::repeat_n(c, width * height));
        }
        Image {
            width,
            height,
            pixels,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    pixels.push(f(c, y, x));
                }
            }
        }
        Image {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.pixels[c * self.width * self.height..(c + 1) * self.width * self.height]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }

    /// Decode from disk (PNG/JPEG), converting to working form.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| CoreError::Image {
                path: path.to_path_buf(),
                source: e,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut pixels = vec![0.0f32; 3 * w * h];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                pixels[(c * h + y as usize) * w + x as usize] = p.0[c] as f32 / 255.0;
            }
        }
        Image::new(w, h, pixels)
    }

    /// Write as lossless PNG (storage form is 8-bit, round-to-nearest).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [
                    (self.get(0, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                    (self.get(1, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                    (self.get(2, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                ];
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save(path).map_err(|e| CoreError::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Crop to `[x0, x0+w) x [y0, y0+h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(CoreError::InvalidArgument {
                op: "crop",
                msg: format!(
                    "crop {x0},{y0} {w}x{h} outside image {}x{}",
                    self.width, self.height
                ),
            });
        }
        let mut out = Image::constant(w, h, [0.0; 3]);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, y, x, self.get(c, y0 + y, x0 + x));
                }
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.width, self.height, |c, y, x| {
            self.get(c, y, self.width - 1 - x)
        })
    }

    pub fn flip_vertical(&self) -> Image {
        Image::from_fn(self.width, self.height, |c, y, x| {
            self.get(c, self.height - 1 - y, x)
        })
    }

    /// `[1, 3, H, W]` tensor in storage range `[0, 1]`.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, 3, self.height, self.width],
            self.pixels.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("image invariants guarantee the shape")
    }

    /// Single image back from a `[1, 3, H, W]` or `[3, H, W]` tensor.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Image> {
        let (h, w) = match t.shape() {
            &[1, 3, h, w] | &[3, h, w] => (h, w),
            other => {
                return Err(CoreError::InvalidArgument {
                    op: "image_from_tensor",
                    msg: format!("expected [1,3,H,W] or [3,H,W], got {other:?}"),
                })
            }
        };
        Image::new(
            w,
            h,
            t.data().iter().map(|&v| v.as_f64() as f32).collect(),
        )
    }
}

/// LR/HR training pair plus the upsampled condition.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub lr: Image,
    pub hr: Image,
    pub lr_up: Image,
}

/// Center-crop to square, bicubic to `hr_size`, derive the LR member by
/// bicubic downscale and the condition by bicubic upscale back.
pub fn make_pair(img: &Image, hr_size: usize, scale: usize) -> Result<ImagePair> {
    if scale == 0 || hr_size % scale != 0 {
        return Err(CoreError::InvalidArgument {
            op: "make_pair",
            msg: format!("hr_size {hr_size} not divisible by scale {scale}"),
        });
    }
    if img.width() < hr_size || img.height() < hr_size {
        return Err(CoreError::Dataset(format!(
            "image {}x{} smaller than hr_size {hr_size}",
            img.width(),
            img.height()
        )));
    }
    let side = img.width().min(img.height());
    let x0 = (img.width() - side) / 2;
    let y0 = (img.height() - side) / 2;
    let square = img.crop(x0, y0, side, side)?;
    let hr = bicubic_resize(&square, hr_size, hr_size)?;
    let lr = bicubic_resize(&hr, hr_size / scale, hr_size / scale)?;
    let lr_up = bicubic_resize(&lr, hr_size, hr_size)?;
    Ok(ImagePair { lr, hr, lr_up })
}

/// Apply the same random horizontal/vertical flips to every member.
pub fn augment(pair: &ImagePair, rng: &mut Rng) -> ImagePair {
    let mut out = pair.clone();
    if rng.uniform() < 0.5 {
        out.lr = out.lr.flip_horizontal();
        out.hr = out.hr.flip_horizontal();
        out.lr_up = out.lr_up.flip_horizontal();
    }
    if rng.uniform() < 0.5 {
        out.lr = out.lr.flip_vertical();
        out.hr = out.hr.flip_vertical();
        out.lr_up = out.lr_up.flip_vertical();
    }
    out
}

// -- corpus ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// One manifest row: passive metadata carried through preprocessing.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub label: String,
    pub orig_width: usize,
    pub orig_height: usize,
    pub cleaned: bool,
}

pub fn write_manifest(root: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut body = String::from("id\tlabel\torig_width\torig_height\tcleaned\n");
    for e in entries {
        body.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.id, e.label, e.orig_width, e.orig_height, e.cleaned
        ));
    }
    let path = root.join("manifest.tsv");
    std::fs::write(&path, body).map_err(|e| CoreError::io(path.clone(), e))
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join("manifest.tsv");
    let body = std::fs::read_to_string(&path).map_err(|e| CoreError::io(path.clone(), e))?;
    let mut entries = Vec::new();
    for line in body.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(CoreError::Dataset(format!("malformed manifest row: {line}")));
        }
        entries.push(ManifestEntry {
            id: cols[0].to_string(),
            label: cols[1].to_string(),
            orig_width: cols[2].parse().map_err(|_| {
                CoreError::Dataset(format!("bad width in manifest row: {line}"))
            })?,
            orig_height: cols[3].parse().map_err(|_| {
                CoreError::Dataset(format!("bad height in manifest row: {line}"))
            })?,
            cleaned: cols[4] == "true",
        });
    }
    Ok(entries)
}

/// Handle onto one split of a preprocessed corpus.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    root: PathBuf,
    split: Split,
    index: Vec<String>,
    scale_factor: usize,
    hr_size: usize,
}

impl DatasetHandle {
    /// Open a split; the index is the lexicographically sorted id list.
    pub fn open(root: &Path, split: Split, hr_size: usize, scale_factor: usize) -> Result<Self> {
        if scale_factor == 0 || hr_size % scale_factor != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "hr_size {hr_size} not divisible by scale {scale_factor}"
            )));
        }
        let dir = root.join(split.dir_name());
        let mut index = Vec::new();
        let entries = std::fs::read_dir(&dir).map_err(|e| CoreError::io(dir.clone(), e))?;
        for entry in entries {
            let entry = entry.map_err(|e| CoreError::io(dir.clone(), e))?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) == Some("png") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    index.push(stem.to_string());
                }
            }
        }
        index.sort();
        if index.is_empty() {
            return Err(CoreError::Dataset(format!(
                "no items under {}",
                dir.display()
            )));
        }
        Ok(DatasetHandle {
            root: root.to_path_buf(),
            split,
            index,
            scale_factor,
            hr_size,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.index
    }

    pub fn hr_size(&self) -> usize {
        self.hr_size
    }

    pub fn scale_factor(&self) -> usize {
        self.scale_factor
    }

    pub fn item_path(&self, id: &str) -> PathBuf {
        self.root
            .join(self.split.dir_name())
            .join(format!("{id}.png"))
    }

    /// Load one item and build its pair.
    pub fn load_pair(&self, id: &str) -> Result<ImagePair> {
        let img = Image::load(&self.item_path(id))?;
        make_pair(&img, self.hr_size, self.scale_factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut rng = Rng::new(1);
        // storage-form values (multiples of 1/255) survive exactly
        let img = Image::from_fn(9, 7, |_, _, _| {
            (rng.index(256) as f32) / 255.0
        });
        img.save(&path).unwrap();
        let back = Image::load(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn one_pixel_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("px.png");
        let img = Image::new(1, 1, vec![10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0]).unwrap();
        img.save(&path).unwrap();
        assert_eq!(Image::load(&path).unwrap(), img);
    }

    #[test]
    fn load_missing_file_names_path() {
        let err = Image::load(Path::new("/nonexistent/img.png")).unwrap_err();
        assert!(err.to_string().contains("nonexistent"));
    }

    #[test]
    fn decode_reference_fixture_pixels() {
        // fixture written through the independent `image` encoder directly
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.png");
        let mut buf = image::RgbImage::new(2, 2);
        buf.put_pixel(0, 0, image::Rgb([255, 0, 0]));
        buf.put_pixel(1, 0, image::Rgb([0, 255, 0]));
        buf.put_pixel(0, 1, image::Rgb([0, 0, 255]));
        buf.put_pixel(1, 1, image::Rgb([51, 102, 153]));
        buf.save(&path).unwrap();
        let img = Image::load(&path).unwrap();
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(1, 0, 1), 1.0);
        assert_eq!(img.get(2, 1, 0), 1.0);
        assert_eq!(img.get(0, 1, 1), 51.0 / 255.0);
        assert_eq!(img.get(1, 1, 1), 102.0 / 255.0);
        assert_eq!(img.get(2, 1, 1), 153.0 / 255.0);
    }

    #[test]
    fn double_flip_is_identity() {
        let mut rng = Rng::new(2);
        let img = Image::from_fn(6, 5, |_, _, _| rng.uniform() as f32);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_vertical().flip_vertical(), img);
    }

    #[test]
    fn pair_construction_contracts() {
        let mut rng = Rng::new(3);
        let img = Image::from_fn(40, 48, |_, _, _| rng.uniform() as f32);
        let pair = make_pair(&img, 32, 4).unwrap();
        assert_eq!((pair.lr.width(), pair.lr.height()), (8, 8));
        assert_eq!((pair.hr.width(), pair.hr.height()), (32, 32));
        assert_eq!((pair.lr_up.width(), pair.lr_up.height()), (32, 32));

        // scale 1: lr_up == hr within 1e-6
        let pair1 = make_pair(&img, 32, 1).unwrap();
        for (a, b) in pair1.lr_up.pixels().iter().zip(pair1.hr.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }

        // composition equality: lr_up = up(down(hr))
        let down = bicubic_resize(&pair.hr, 8, 8).unwrap();
        assert_eq!(down, pair.lr, "same code path must produce identical lr");
        let up = bicubic_resize(&down, 32, 32).unwrap();
        assert_eq!(up, pair.lr_up);

        assert!(make_pair(&img, 64, 4).is_err(), "too-small image rejected");
        assert!(make_pair(&img, 32, 5).is_err(), "non-divisible scale");
    }

    #[test]
    fn augment_keeps_members_aligned() {
        let mut rng = Rng::new(4);
        let img = Image::from_fn(40, 40, |_, _, _| rng.uniform() as f32);
        let pair = make_pair(&img, 16, 2).unwrap();
        // force both flips by scanning seeds for one that flips h and v
        let mut flip_rng = Rng::new(11);
        let out = augment(&pair, &mut flip_rng);
        // whatever the flips were, hr and lr_up must have received the same ones:
        // flipping back with the inverse of the hr transform must recover both
        let candidates = [
            (out.hr.clone(), out.lr_up.clone()),
            (out.hr.flip_horizontal(), out.lr_up.flip_horizontal()),
            (out.hr.flip_vertical(), out.lr_up.flip_vertical()),
            (
                out.hr.flip_horizontal().flip_vertical(),
                out.lr_up.flip_horizontal().flip_vertical(),
            ),
        ];
        let matched = candidates
            .iter()
            .any(|(h, l)| h == &pair.hr && l == &pair.lr_up);
        assert!(matched, "hr and lr_up must undergo identical flips");

        // seeded rng reproducibility
        let a = augment(&pair, &mut Rng::new(9));
        let b = augment(&pair, &mut Rng::new(9));
        assert_eq!(a.hr, b.hr);
        assert_eq!(a.lr, b.lr);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            ManifestEntry {
                id: "a".into(),
                label: "polyp".into(),
                orig_width: 640,
                orig_height: 480,
                cleaned: true,
            },
            ManifestEntry {
                id: "b".into(),
                label: "toy".into(),
                orig_width: 32,
                orig_height: 32,
                cleaned: false,
            },
        ];
        write_manifest(dir.path(), &entries).unwrap();
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].id, "a");
        assert_eq!(back[0].orig_width, 640);
        assert!(back[0].cleaned);
        assert!(!back[1].cleaned);
    }
}
