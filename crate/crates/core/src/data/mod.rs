//! Directory-per-class image corpora, seeded 70/20/10 splits, preprocessing
//! and a separable synthetic dataset generator.

pub mod image;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use image::{decode_image, encode_ppm, read_image, resize_bilinear, RgbImage};

/// Number of training images (in index order) used for int8 calibration.
pub const CALIBRATION_IMAGES: usize = 32;
pub const MIN_CLASS_IMAGES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub resize_shorter: usize,
    pub crop: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl PreprocessSpec {
    /// Normalization constants for natural photographs.
    pub fn imagenet(resize_shorter: usize, crop: usize) -> Self {
        PreprocessSpec {
            resize_shorter,
            crop,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }

    /// Synthetic images: no resize beyond `size`, mean/std 0.5.
    pub fn synthetic(size: usize) -> Self {
        PreprocessSpec {
            resize_shorter: size,
            crop: size,
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize_shorter {
            return Err(Error::Config(format!(
                "crop {} must be in 1..={}",
                self.crop, self.resize_shorter
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("std must be positive and mean finite".into()));
        }
        Ok(())
    }
}

/// Resize the shorter side, center-crop, scale to [0, 1] and normalize.
pub fn preprocess_image(img: &RgbImage, spec: &PreprocessSpec) -> Result<Tensor> {
    spec.validate()?;
    let r = spec.resize_shorter;
    let (w, h) = if img.width <= img.height {
        (r, ((img.height * r) as f64 / img.width as f64).round() as usize)
    } else {
        (((img.width * r) as f64 / img.height as f64).round() as usize, r)
    };
    let resized = resize_bilinear(img, w, h);
    let (top, left) = ((h - spec.crop) / 2, (w - spec.crop) / 2);
    let mut out = Vec::with_capacity(spec.crop * spec.crop * 3);
    for y in 0..spec.crop {
        let row = &resized[((top + y) * w + left) * 3..][..spec.crop * 3];
        for px in row.chunks_exact(3) {
            for c in 0..3 {
                out.push((px[c] / 255.0 - spec.mean[c]) / spec.std[c]);
            }
        }
    }
    Tensor::from_f32(vec![spec.crop, spec.crop, 3], out)
}

/// Decode then [`preprocess_image`]. `path` is reported on decode errors.
pub fn preprocess(bytes: &[u8], path: &Path, spec: &PreprocessSpec) -> Result<Tensor> {
    preprocess_image(&decode_image(bytes, path)?, spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    /// Relative to the dataset root.
    pub path: PathBuf,
    pub class: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub seed: u64,
    pub root: PathBuf,
    pub classes: Vec<String>,
    #[serde(default)]
    pub skipped: usize,
    pub samples: Vec<SampleEntry>,
}

/// Split sizes for a class of `n` images: floor(0.7n), floor(0.2n), rest.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = n * 7 / 10;
    let val = n * 2 / 10;
    (train, val, n - train - val)
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ppm" | "png"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Index `root/<class>/*.{ppm,png}` and assign a seeded per-class split.
///
/// Undecodable files are skipped with a warning. Samples are listed
/// round-robin across classes so any prefix of a split is class-balanced.
pub fn index_and_split(root: &Path, seed: u64) -> Result<DatasetIndex> {
    let mut classes = Vec::new();
    let mut per_class: Vec<Vec<PathBuf>> = Vec::new();
    let mut skipped = 0;
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Dataset(format!("non UTF-8 class directory {}", dir.display())))?
            .to_string();
        let mut files = Vec::new();
        for f in sorted_entries(&dir)? {
            if !f.is_file() || !is_image_file(&f) {
                continue;
            }
            match read_image(&f) {
                Ok(_) => files.push(f.strip_prefix(root).expect("under root").to_path_buf()),
                Err(e) => {
                    log::warn!("skipping {}: {e}", f.display());
                    skipped += 1;
                }
            }
        }
        if files.is_empty() {
            return Err(Error::Dataset(format!("class '{name}' has no readable images")));
        }
        if files.len() < MIN_CLASS_IMAGES {
            return Err(Error::Dataset(format!(
                "class '{name}' has {} images, need at least {MIN_CLASS_IMAGES}",
                files.len()
            )));
        }
        classes.push(name);
        per_class.push(files);
    }
    if classes.is_empty() {
        return Err(Error::Dataset(format!("no class directories under {}", root.display())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assigned: Vec<Vec<SampleEntry>> = Vec::new();
    for (class, files) in per_class.iter_mut().enumerate() {
        files.shuffle(&mut rng);
        let (train, val, _) = split_counts(files.len());
        assigned.push(
            files
                .iter()
                .enumerate()
                .map(|(i, path)| SampleEntry {
                    path: path.clone(),
                    class,
                    split: if i < train {
                        Split::Train
                    } else if i < train + val {
                        Split::Val
                    } else {
                        Split::Test
                    },
                })
                .collect(),
        );
    }
    let longest = assigned.iter().map(Vec::len).max().unwrap_or(0);
    let mut samples = Vec::new();
    for i in 0..longest {
        for list in &assigned {
            if let Some(s) = list.get(i) {
                samples.push(s.clone());
            }
        }
    }
    Ok(DatasetIndex {
        seed,
        root: root.to_path_buf(),
        classes,
        skipped,
        samples,
    })
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleEntry> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let index: DatasetIndex = serde_json::from_str(&text)?;
        for s in &index.samples {
            if s.class >= index.classes.len() {
                return Err(Error::Dataset(format!(
                    "{}: class {} out of range",
                    s.path.display(),
                    s.class
                )));
            }
        }
        Ok(index)
    }

    /// Decode and preprocess every sample of `split`, in index order.
    pub fn load_split(&self, split: Split, spec: &PreprocessSpec) -> Result<Vec<Example>> {
        let entries: Vec<&SampleEntry> = self.split(split).collect();
        entries
            .par_iter()
            .map(|s| {
                let img = read_image(&self.root.join(&s.path))?;
                Ok(Example {
                    image: preprocess_image(&img, spec)?,
                    label: s.class,
                })
            })
            .collect()
    }

    /// The first [`CALIBRATION_IMAGES`] training images.
    pub fn calibration_set(&self, spec: &PreprocessSpec) -> Result<Vec<Tensor>> {
        self.split(Split::Train)
            .take(CALIBRATION_IMAGES)
            .map(|s| preprocess_image(&read_image(&self.root.join(&s.path))?, spec))
            .collect()
    }
}

/// A preprocessed image and its class index.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Tensor,
    pub label: usize,
}

pub const SYNTHETIC_NOISE_SIGMA: f32 = 0.1;

/// Dominant RGB colour of class `c` of `k`: evenly spaced hues.
fn class_color(c: usize, k: usize) -> [f32; 3] {
    let h = c as f32 / k as f32 * 6.0;
    let (s, v) = (0.65f32, 0.75f32);
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h.floor() as usize % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// One synthetic image of class `c`: class hue (with small per-image jitter),
/// a sinusoidal texture whose frequency depends on the class, and Gaussian
/// noise with sigma 0.1 of the 0..255 range.
pub fn synthetic_image(c: usize, k: usize, size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let base = class_color(c, k);
    let jitter: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let freq = 1.0 + c as f32;
    let theta = rng.random_range(0.0..std::f32::consts::PI);
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f32 * ct + y as f32 * st) / size as f32;
            let wave = 0.12 * (std::f32::consts::TAU * freq * u + phase).sin();
            for ch in 0..3 {
                let noise: f32 = rng.sample::<f32, _>(StandardNormal) * SYNTHETIC_NOISE_SIGMA;
                let v = base[ch] + jitter[ch] + wave + noise;
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    RgbImage {
        width: size,
        height: size,
        pixels,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSummary {
    pub classes: Vec<String>,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

/// Write `k` class directories of `n` PPM images each under `dir`.
pub fn generate_synthetic(dir: &Path, k: usize, n: usize, size: usize, seed: u64) -> Result<SyntheticSummary> {
    if k < 2 || n < 30 || size == 0 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs >= 2 classes, >= 30 images per class and size > 0 (got {k}, {n}, {size})"
        )));
    }
    let classes: Vec<String> = (0..k).map(|c| format!("class_{c:02}")).collect();
    for name in &classes {
        let d = dir.join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    (0..k * n).into_par_iter().try_for_each(|idx| {
        let (c, i) = (idx / n, idx % n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(idx as u64);
        let img = synthetic_image(c, k, size, &mut rng);
        let path = dir.join(&classes[c]).join(format!("img_{i:04}.ppm"));
        fs::write(&path, encode_ppm(&img)).map_err(|e| Error::io(&path, e))
    })?;
    Ok(SyntheticSummary {
        classes,
        per_class: n,
        size,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_rounding_rule() {
        assert_eq!(split_counts(100), (70, 20, 10));
        assert_eq!(split_counts(10), (7, 2, 1));
        assert_eq!(split_counts(33), (23, 6, 4));
    }

    #[test]
    fn identity_preprocess_keeps_layout() {
        let img = RgbImage::new(2, 2, (0..12).map(|v| v * 20).collect()).unwrap();
        let spec = PreprocessSpec {
            resize_shorter: 2,
            crop: 2,
            mean: [0.0; 3],
            std: [1.0; 3],
        };
        let t = preprocess_image(&img, &spec).unwrap();
        assert_eq!(t.shape(), &[2, 2, 3]);
        let want: Vec<f32> = img.pixels.iter().map(|&v| v as f32 / 255.0).collect();
        assert_eq!(t.as_f32().unwrap(), want.as_slice());
    }

    #[test]
    fn gray_128_normalizes_near_zero() {
        let img = RgbImage::filled(5, 5, [128; 3]);
        let t = preprocess_image(&img, &PreprocessSpec::synthetic(4)).unwrap();
        let want = (128.0 / 255.0 - 0.5) / 0.5;
        assert!((want - 0.0039f32).abs() < 1e-4);
        assert!(t.as_f32().unwrap().iter().all(|&v| (v - want).abs() < 1e-6));
    }

    #[test]
    fn wide_image_resizes_shorter_side() {
        let img = RgbImage::filled(20, 10, [10, 20, 30]);
        let spec = PreprocessSpec::imagenet(6, 6);
        let t = preprocess_image(&img, &spec).unwrap();
        assert_eq!(t.shape(), &[6, 6, 3]);
        let bad = PreprocessSpec::imagenet(4, 6);
        assert!(preprocess_image(&img, &bad).is_err());
    }

    #[test]
    fn class_colors_are_distinct() {
        for k in 2..9 {
            for a in 0..k {
                for b in a + 1..k {
                    let (ca, cb) = (class_color(a, k), class_color(b, k));
                    let d: f32 = ca.iter().zip(&cb).map(|(x, y)| (x - y).powi(2)).sum();
                    assert!(d > 0.01, "k={k} {a} {b}");
                }
            }
        }
    }
}
