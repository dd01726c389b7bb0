//! Images, datasets, and dataset construction.
//!
//! Two ingestion paths: class-labelled PNG directory trees, and a seeded
//! procedural generator producing class-conditional images (one base hue and
//! shape family per class). Both yield square, equal-sized images with dense
//! class ids.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::resample;
use crate::rng::derive_rng;

/// Row-major HWC pixel buffer, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(contract(format!(
                "image buffer length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("image contains non-finite values".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Largest centered square crop.
    pub fn center_cropped_square(&self) -> Image {
        if self.is_square() {
            return self.clone();
        }
        let side = self.width.min(self.height);
        let x0 = (self.width - side) / 2;
        let y0 = (self.height - side) / 2;
        let mut out = Image::zeros(side, side, self.channels);
        for y in 0..side {
            for x in 0..side {
                for c in 0..self.channels {
                    out.set(x, y, c, self.at(x0 + x, y0 + y, c));
                }
            }
        }
        out
    }

    /// Bilinear resize of a square image.
    pub fn resized(&self, size: usize) -> Result<Image> {
        if !self.is_square() {
            return Err(contract("resized() requires a square image"));
        }
        let data = resample::resize_channels(&self.data, self.width, size, self.channels);
        Ok(Image {
            width: size,
            height: size,
            channels: self.channels,
            data,
        })
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::Data(format!(
                "rgb8 buffer length {} does not match {width}x{height}x3",
                bytes.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels: 3,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }

    /// Clamps to `[0, 1]` and quantizes to 8-bit RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        assert_eq!(self.channels, 3, "to_rgb8 requires 3 channels");
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn mean_rgb(&self) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        let n = (self.width * self.height) as f64;
        for px in self.data.chunks(self.channels) {
            for c in 0..3.min(self.channels) {
                acc[c] += px[c];
            }
        }
        acc.map(|v| v / n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub image: Image,
    pub class_id: usize,
}

/// Square, equal-sized images with dense class ids in `[0, num_classes)`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
    pub class_names: Vec<String>,
    pub split: SplitTag,
    /// Files skipped during ingestion because they could not be decoded.
    pub skipped_files: usize,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.items.first().map(|i| i.image.width).unwrap_or(0)
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes()];
        for item in &self.items {
            counts[item.class_id] += 1;
        }
        counts
    }

    pub fn indices_of_class(&self, class_id: usize) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.class_id == class_id)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Spec for the procedural generator.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
    /// Rotates every class hue by this many degrees; distinguishes an
    /// upstream pre-training palette from a downstream target palette.
    #[serde(default)]
    pub hue_shift: f64,
    /// Width of the hue range the classes are spread over (defaults to the
    /// full 360-degree ring). Narrow spans give a palette whose pooled
    /// color statistics differ strongly from the full ring.
    #[serde(default = "default_hue_span")]
    pub hue_span: f64,
}

fn default_hue_span() -> f64 {
    360.0
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Class-conditional procedural images: one base hue and shape family per
/// class, with seeded jitter on color, position and size. Byte-identical
/// for a given spec.
pub fn synth_dataset(spec: &SynthSpec, split: SplitTag) -> Result<Dataset> {
    if spec.num_classes < 1 || spec.per_class < 1 || spec.size < 4 {
        return Err(contract(format!(
            "synth spec requires num_classes >= 1, per_class >= 1, size >= 4, got {spec:?}"
        )));
    }
    let split_salt = match split {
        SplitTag::Train => 0u64,
        SplitTag::Test => 1u64,
    };
    let mut items = Vec::with_capacity(spec.num_classes * spec.per_class);
    for class in 0..spec.num_classes {
        let base_hue = spec.hue_shift + spec.hue_span * class as f64 / spec.num_classes as f64;
        for idx in 0..spec.per_class {
            let mut rng = derive_rng(spec.seed, &[split_salt, class as u64, idx as u64]);
            let hue = base_hue + rng.gen_range(-12.0..12.0);
            let bg = hsv_to_rgb(
                hue,
                0.72 + rng.gen_range(-0.08..0.08),
                0.42 + rng.gen_range(-0.08..0.08),
            );
            let fg = hsv_to_rgb(
                hue + 34.0 + rng.gen_range(-8.0..8.0),
                0.85,
                0.92 + rng.gen_range(-0.06..0.03),
            );
            let s = spec.size as f64;
            let cx = s / 2.0 + rng.gen_range(-s * 0.12..s * 0.12);
            let cy = s / 2.0 + rng.gen_range(-s * 0.12..s * 0.12);
            let r = s * (0.22 + rng.gen_range(0.0..0.10));

            let mut img = Image::zeros(spec.size, spec.size, 3);
            for y in 0..spec.size {
                for x in 0..spec.size {
                    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                    let inside = match class % 4 {
                        0 => (fx - cx).hypot(fy - cy) <= r,
                        1 => (fx - cx).abs() <= r && (fy - cy).abs() <= r,
                        2 => ((fy - cy).abs() % (r * 0.9)) <= r * 0.4,
                        _ => (fx - cx).abs() + (fy - cy).abs() <= r * 1.3,
                    };
                    let color = if inside { fg } else { bg };
                    for c in 0..3 {
                        img.set(x, y, c, color[c]);
                    }
                }
            }
            items.push(DatasetItem {
                image: img,
                class_id: class,
            });
        }
    }
    Ok(Dataset {
        items,
        class_names: (0..spec.num_classes).map(|c| format!("class_{c:02}")).collect(),
        split,
        skipped_files: 0,
    })
}

/// Loads a `root/<class>/<image>.png` tree: center-crop to square, bilinear
/// resize to `image_size`, lexicographic path order.
pub fn load_dataset(root: &Path, image_size: usize, split: SplitTag) -> Result<Dataset> {
    let mut class_dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::Data(format!("cannot read dataset root {}: {e}", root.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(contract(format!(
            "dataset root {} contains no class directories",
            root.display()
        )));
    }

    let mut items = Vec::new();
    let mut class_names = Vec::new();
    let mut skipped = 0usize;
    for (class_id, dir) in class_dirs.iter().enumerate() {
        class_names.push(
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("class_{class_id:02}")),
        );
        let mut files: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .map(|e| e.eq_ignore_ascii_case("png"))
                        .unwrap_or(false)
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(contract(format!(
                "class directory {} contains no PNG files",
                dir.display()
            )));
        }
        for path in files {
            match load_png(&path) {
                Ok(img) => {
                    let img = img.center_cropped_square().resized(image_size)?;
                    items.push(DatasetItem {
                        image: img,
                        class_id,
                    });
                }
                Err(e) => {
                    eprintln!("warning: skipping {}: {e}", path.display());
                    skipped += 1;
                }
            }
        }
    }
    Ok(Dataset {
        items,
        class_names,
        split,
        skipped_files: skipped,
    })
}

pub fn load_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|e| Error::Data(format!("png decode: {e}")))?;
    let rgb = dynimg.to_rgb8();
    Image::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
}

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(image.width as u32, image.height as u32, image.to_rgb8())
        .ok_or_else(|| Error::Data("rgb buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("png encode {}: {e}", path.display())))
}

/// Writes `root/<class>/img_<idx>.png` for every item.
pub fn save_dataset_png(dataset: &Dataset, root: &Path) -> Result<()> {
    for (name, _) in dataset.class_names.iter().zip(0..) {
        fs::create_dir_all(root.join(name))?;
    }
    let mut counters = vec![0usize; dataset.num_classes()];
    for item in &dataset.items {
        let name = &dataset.class_names[item.class_id];
        let idx = counters[item.class_id];
        counters[item.class_id] += 1;
        save_png(&item.image, &root.join(name).join(format!("img_{idx:05}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec() -> SynthSpec {
        SynthSpec {
            num_classes: 4,
            per_class: 8,
            size: 16,
            seed: 11,
            hue_shift: 0.0,
            hue_span: 360.0,
        }
    }

    #[test]
    fn synth_is_reproducible() {
        let a = synth_dataset(&toy_spec(), SplitTag::Train).unwrap();
        let b = synth_dataset(&toy_spec(), SplitTag::Train).unwrap();
        assert_eq!(a.len(), 32);
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.class_id, y.class_id);
        }
    }

    #[test]
    fn splits_differ() {
        let a = synth_dataset(&toy_spec(), SplitTag::Train).unwrap();
        let b = synth_dataset(&toy_spec(), SplitTag::Test).unwrap();
        assert_ne!(a.items[0].image, b.items[0].image);
    }

    #[test]
    fn per_class_of_one() {
        let spec = SynthSpec {
            num_classes: 5,
            per_class: 1,
            size: 8,
            seed: 0,
            hue_shift: 0.0,
            hue_span: 360.0,
        };
        let d = synth_dataset(&spec, SplitTag::Train).unwrap();
        assert_eq!(d.len(), 5);
        assert_eq!(d.per_class_counts(), vec![1; 5]);
    }

    #[test]
    fn class_mean_colors_separate_from_intra_class_spread() {
        let spec = SynthSpec {
            num_classes: 4,
            per_class: 64,
            size: 16,
            seed: 3,
            hue_shift: 0.0,
            hue_span: 360.0,
        };
        let d = synth_dataset(&spec, SplitTag::Train).unwrap();
        let mut means = vec![[0.0f64; 3]; 4];
        for it in &d.items {
            let m = it.image.mean_rgb();
            for c in 0..3 {
                means[it.class_id][c] += m[c] / 64.0;
            }
        }
        let mut intra = vec![0.0f64; 4];
        for it in &d.items {
            let m = it.image.mean_rgb();
            let mu = means[it.class_id];
            let d2: f64 = (0..3).map(|c| (m[c] - mu[c]).powi(2)).sum();
            intra[it.class_id] += d2 / 64.0;
        }
        let intra_std = intra.iter().map(|v| v.sqrt()).fold(0.0, f64::max);
        let mut min_sep = f64::INFINITY;
        for a in 0..4 {
            for b in (a + 1)..4 {
                let d2: f64 = (0..3).map(|c| (means[a][c] - means[b][c]).powi(2)).sum();
                min_sep = min_sep.min(d2.sqrt());
            }
        }
        assert!(
            min_sep > intra_std,
            "class separation {min_sep} vs intra-class std {intra_std}"
        );
    }

    #[test]
    fn png_round_trip_through_directory_tree() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            num_classes: 2,
            per_class: 3,
            size: 16,
            seed: 5,
            hue_shift: 0.0,
            hue_span: 360.0,
        };
        let d = synth_dataset(&spec, SplitTag::Train).unwrap();
        save_dataset_png(&d, tmp.path()).unwrap();

        let l1 = load_dataset(tmp.path(), 16, SplitTag::Train).unwrap();
        let l2 = load_dataset(tmp.path(), 16, SplitTag::Train).unwrap();
        assert_eq!(l1.len(), 6);
        assert_eq!(l1.num_classes(), 2);
        assert_eq!(l1.skipped_files, 0);
        // re-ingestion is byte-identical
        for (a, b) in l1.items.iter().zip(&l2.items) {
            assert_eq!(a.image, b.image);
        }
    }

    #[test]
    fn empty_root_is_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(load_dataset(tmp.path(), 16, SplitTag::Train).is_err());
    }

    #[test]
    fn empty_class_dir_is_error() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::create_dir(tmp.path().join("classA")).unwrap();
        assert!(load_dataset(tmp.path(), 16, SplitTag::Train).is_err());
    }

    #[test]
    fn unreadable_file_skipped_with_count() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            num_classes: 1,
            per_class: 2,
            size: 8,
            seed: 1,
            hue_shift: 0.0,
            hue_span: 360.0,
        };
        let d = synth_dataset(&spec, SplitTag::Train).unwrap();
        save_dataset_png(&d, tmp.path()).unwrap();
        std::fs::write(tmp.path().join("class_00/broken.png"), b"not a png").unwrap();
        let loaded = load_dataset(tmp.path(), 8, SplitTag::Train).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.skipped_files, 1);
    }
}
