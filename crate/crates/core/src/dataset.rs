//! Training-set construction: deterministic patch extraction from a directory
//! of images, per-patch speckle, and a procedural scene generator for when no
//! photographs are at hand.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{conv2d_direct_unchecked, Image, Kernel};
use crate::io::load_image;
use crate::speckle::{sample_speckle, NoisyPair, SpeckleConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropPolicy {
    /// Uniformly random offsets drawn from the dataset seed.
    Random,
    /// A single centered crop per image.
    Center,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub dir: PathBuf,
    pub patch: usize,
    pub per_image: usize,
    pub crop: CropPolicy,
    pub seed: u64,
}

/// Provenance of one emitted pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub source: String,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub noise_seed: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<NoisyPair>,
    pub manifest: Vec<ManifestEntry>,
    /// One message per skipped file.
    pub warnings: Vec<String>,
}

impl Dataset {
    /// `source,x,y,size,seed` rows under a header.
    pub fn manifest_csv(&self) -> String {
        let mut out = String::from("source,x,y,size,seed\n");
        for e in &self.manifest {
            let _ = writeln!(out, "{},{},{},{},{}", e.source, e.x, e.y, e.size, e.noise_seed);
        }
        out
    }
}

/// Seed of the `index`-th draw from a stream keyed by `stream`.
fn derived_seed(base: u64, stream: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.set_word_pos(2 * index as u128);
    rng.next_u64()
}

/// Files of `dir` sorted by name.
fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

/// Crops `spec.per_image` patches from every readable image in `spec.dir` and
/// speckles each with its own seed derived from `cfg.seed`. The result depends
/// only on the directory contents, `spec` and `cfg`.
pub fn build_dataset(spec: &DatasetSpec, cfg: &SpeckleConfig) -> Result<Dataset> {
    if spec.patch == 0 || spec.per_image == 0 {
        return Err(Error::Parameter("patch size and patches per image must be positive".into()));
    }
    let files = list_files(&spec.dir)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("{} contains no files", spec.dir.display())));
    }
    let mut pairs = Vec::new();
    let mut manifest = Vec::new();
    let mut warnings = Vec::new();
    for (file_index, path) in files.iter().enumerate() {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let img = match load_image(path) {
            Ok(img) => img,
            Err(e) => {
                warnings.push(format!("skipping {name}: {e}"));
                continue;
            }
        };
        let (w, h) = img.dims();
        if w < spec.patch || h < spec.patch {
            warnings.push(format!("skipping {name}: {w}x{h} is smaller than the {0}x{0} patch", spec.patch));
            continue;
        }
        if img.as_slice().iter().any(|&v| v < 0.0) {
            warnings.push(format!("skipping {name}: negative pixels"));
            continue;
        }
        let mut crop_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        crop_rng.set_stream(file_index as u64);
        for k in 0..spec.per_image {
            let (x, y) = match spec.crop {
                CropPolicy::Center => ((w - spec.patch) / 2, (h - spec.patch) / 2),
                CropPolicy::Random => (
                    crop_rng.random_range(0..=w - spec.patch),
                    crop_rng.random_range(0..=h - spec.patch),
                ),
            };
            let noise_seed = derived_seed(cfg.seed, file_index as u64, k);
            let clean = img.crop(x, y, spec.patch, spec.patch)?;
            pairs.push(sample_speckle(&clean, &SpeckleConfig::new(cfg.looks, noise_seed)?)?);
            manifest.push(ManifestEntry {
                source: name.clone(),
                x,
                y,
                size: spec.patch,
                noise_seed,
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(format!(
            "no usable images in {} ({} skipped)",
            spec.dir.display(),
            warnings.len()
        )));
    }
    Ok(Dataset {
        pairs,
        manifest,
        warnings,
    })
}

/// Speckles already-cropped clean images, one derived seed per image.
pub fn speckle_all(clean: &[Image], cfg: &SpeckleConfig) -> Result<Vec<NoisyPair>> {
    clean
        .iter()
        .enumerate()
        .map(|(i, img)| sample_speckle(img, &SpeckleConfig::new(cfg.looks, derived_seed(cfg.seed, u64::MAX, i))?))
        .collect()
}

/// Piecewise-smooth synthetic scene with values in `[0.08, 0.92] · peak`:
/// a shaded background, overlapping ellipses and rectangles with flat or
/// graded fills, some striped texture, and a light 3×3 blur on the edges.
pub fn synthetic_scene(width: usize, height: usize, peak: f64, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = (width as f64, height as f64);
    let (gx, gy) = (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
    let base = rng.random_range(0.3..0.7);
    let mut img = Image::from_fn(width, height, |x, y| {
        base + gx * (x as f64 / wf - 0.5) + gy * (y as f64 / hf - 0.5)
    });

    let shapes = rng.random_range(6..14);
    for _ in 0..shapes {
        let cx = rng.random_range(0.0..wf);
        let cy = rng.random_range(0.0..hf);
        let rx = rng.random_range(0.05..0.35) * wf;
        let ry = rng.random_range(0.05..0.35) * hf;
        let level = rng.random_range(0.1..0.9);
        let slope = rng.random_range(-0.3..0.3);
        let ellipse = rng.random_bool(0.5);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let stripes = rng.random_bool(0.25).then(|| {
            (
                rng.random_range(0.15..0.8),
                rng.random_range(0.0..std::f64::consts::PI),
                rng.random_range(0.04..0.12),
            )
        });
        let (ca, sa) = (angle.cos(), angle.sin());
        for y in 0..height {
            for x in 0..width {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let u = (ca * dx + sa * dy) / rx;
                let v = (-sa * dx + ca * dy) / ry;
                let inside = if ellipse { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                if inside {
                    let mut value = level + slope * u * 0.5;
                    if let Some((freq, dir, amp)) = stripes {
                        value += amp * (freq * (dir.cos() * x as f64 + dir.sin() * y as f64)).sin();
                    }
                    img.set(x, y, value);
                }
            }
        }
    }
    let blur = Kernel::from_raw(3, vec![1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0, 2.0 / 16.0, 4.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0]);
    conv2d_direct_unchecked(&img, &blur).map(|v| v.clamp(0.08, 0.92) * peak)
}
