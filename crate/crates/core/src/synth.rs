//! Synthetic foci images with exact ground truth.
//!
//! Each focus is a disk of radius `r` at its peak intensity surrounded by a
//! cosine falloff shell of width `r / 2`, drawn over a constant background
//! with additive Gaussian noise. The ground-truth box is the square of side
//! `2r` around the disk core. Image `i` depends only on `(seed, i)`.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, GroundTruth};
use crate::error::{Error, Result};
use crate::io::annotations::{self, AnnotationRecord, ANNOTATION_FILE};
use crate::io::pgm::GrayImage;
use crate::io::Dataset;
use crate::rng::SplitMix64;

pub const MANIFEST_FILE: &str = "manifest.json";
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Peak intensity above background.
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub background: f64,
    pub noise_std: f64,
    /// Chance that a focus is placed near an earlier one.
    pub cluster_prob: f64,
    /// Standard deviation (pixels) of a clustered focus around its parent.
    pub cluster_spread: f64,
    /// Minimum centre distance (pixels) between foci.
    pub min_spacing: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl SynthConfig {
    /// 64x64 images sized for the desk network.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            count_min: 1,
            count_max: 3,
            radius_min: 3.0,
            radius_max: 6.0,
            intensity_min: 110.0,
            intensity_max: 180.0,
            background: 40.0,
            noise_std: 8.0,
            cluster_prob: 0.0,
            cluster_spread: 10.0,
            min_spacing: 16.0,
            seed: 2024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("synthetic data: {msg}")));
        if self.image_size == 0 {
            return bad("image size must be positive");
        }
        if self.count_min > self.count_max {
            return bad("count_min exceeds count_max");
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad("radius range must be positive with min <= max");
        }
        if 2.0 * self.radius_max >= self.image_size as f64 {
            return bad("radius_max does not fit in the image");
        }
        if !(self.intensity_min <= self.intensity_max) {
            return bad("intensity_min exceeds intensity_max");
        }
        if !(self.noise_std >= 0.0 && self.cluster_spread >= 0.0 && self.min_spacing >= 0.0) {
            return bad("noise, spread and spacing must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.cluster_prob) {
            return bad("cluster_prob outside [0, 1]");
        }
        Ok(())
    }
}

/// A focus in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub intensity: f64,
}

impl Blob {
    /// Intensity profile at distance `d` from the centre.
    pub fn profile(&self, d: f64) -> f64 {
        let shell = self.radius / 2.0;
        if d <= self.radius {
            self.intensity
        } else if d < self.radius + shell {
            self.intensity * 0.5 * (1.0 + (PI * (d - self.radius) / shell).cos())
        } else {
            0.0
        }
    }

    pub fn bbox(&self, image_size: usize) -> BBox {
        let s = image_size as f64;
        BBox::new(
            self.x / s,
            self.y / s,
            2.0 * self.radius / s,
            2.0 * self.radius / s,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub image: GrayImage,
    pub blobs: Vec<Blob>,
    pub ground_truth: Vec<GroundTruth>,
}

/// Rejection-samples centres at least `min_spacing` apart. When every
/// attempt fails the last candidate is kept, so configurations too crowded
/// for the image can break the spacing.
fn place_blobs(config: &SynthConfig, rng: &mut SplitMix64) -> Vec<Blob> {
    let count = rng.range_inclusive(config.count_min as u64, config.count_max as u64) as usize;
    let size = config.image_size as f64;
    let mut blobs: Vec<Blob> = Vec::with_capacity(count);
    for _ in 0..count {
        let radius = rng.uniform(config.radius_min, config.radius_max);
        let intensity = rng.uniform(config.intensity_min, config.intensity_max);
        let clustered = !blobs.is_empty() && rng.next_f64() < config.cluster_prob;
        let parent = if clustered {
            Some(blobs[rng.below(blobs.len() as u64) as usize])
        } else {
            None
        };
        let (mut x, mut y) = (0.0, 0.0);
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            (x, y) = match parent {
                Some(p) => (
                    p.x + rng.normal() * config.cluster_spread,
                    p.y + rng.normal() * config.cluster_spread,
                ),
                None => (
                    rng.uniform(radius, size - radius),
                    rng.uniform(radius, size - radius),
                ),
            };
            // the core square stays inside the image
            x = x.clamp(radius, size - radius);
            y = y.clamp(radius, size - radius);
            if blobs
                .iter()
                .all(|b| (b.x - x).hypot(b.y - y) >= config.min_spacing)
            {
                break;
            }
        }
        blobs.push(Blob {
            x,
            y,
            radius,
            intensity,
        });
    }
    blobs
}

/// Renders image `index`.
pub fn generate_image(config: &SynthConfig, index: u64) -> SynthImage {
    let mut rng = SplitMix64::derive(config.seed, index);
    let blobs = place_blobs(config, &mut rng);
    let n = config.image_size;
    let mut pixels = Vec::with_capacity(n * n);
    for py in 0..n {
        for px in 0..n {
            let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
            let signal = blobs
                .iter()
                .map(|b| b.profile((b.x - cx).hypot(b.y - cy)))
                .fold(0.0, f64::max);
            let v = config.background + signal + rng.normal() * config.noise_std;
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    let ground_truth = blobs
        .iter()
        .map(|b| GroundTruth {
            bbox: b.bbox(n),
            class_id: 0,
        })
        .collect();
    SynthImage {
        image: GrayImage::new(n, n, pixels).expect("square image"),
        blobs,
        ground_truth,
    }
}

/// In-memory dataset of images `first_index .. first_index + count`.
pub fn synth_dataset(config: &SynthConfig, first_index: u64, count: usize) -> Dataset {
    let mut data = Dataset {
        root: PathBuf::new(),
        names: Vec::with_capacity(count),
        images: Vec::with_capacity(count),
        ground_truth: Vec::with_capacity(count),
    };
    for i in 0..count {
        let synth = generate_image(config, first_index + i as u64);
        data.names.push(image_name(i));
        data.images.push(synth.image);
        data.ground_truth.push(synth.ground_truth);
    }
    data
}

pub fn image_name(index: usize) -> String {
    format!("img_{index:05}.pgm")
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    /// Index of the first image; held-out splits start past the training range.
    pub first_index: u64,
    pub config: SynthConfig,
    pub annotations: String,
    pub images: Vec<String>,
}

/// Writes `count` images, the annotation file and the manifest into `dir`.
/// A non-empty `dir` is only reused when `overwrite` is set.
pub fn generate_dataset(
    config: &SynthConfig,
    count: usize,
    dir: impl AsRef<Path>,
    overwrite: bool,
) -> Result<Manifest> {
    generate_split(config, 0, count, dir, overwrite)
}

/// Like [`generate_dataset`], with image indices starting at `first_index`.
pub fn generate_split(
    config: &SynthConfig,
    first_index: u64,
    count: usize,
    dir: impl AsRef<Path>,
    overwrite: bool,
) -> Result<Manifest> {
    config.validate()?;
    let dir = dir.as_ref();
    prepare_dir(dir, overwrite)?;
    let mut records = Vec::with_capacity(count);
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let synth = generate_image(config, first_index + i as u64);
        let name = image_name(i);
        synth.image.write(dir.join(&name))?;
        records.push(AnnotationRecord::new(name.clone(), &synth.ground_truth));
        images.push(name);
    }
    annotations::write(dir.join(ANNOTATION_FILE), &records)?;
    let manifest = Manifest {
        count,
        first_index,
        config: config.clone(),
        annotations: ANNOTATION_FILE.into(),
        images,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Re-creates a dataset from its manifest into `dir`.
pub fn regenerate(
    manifest_path: impl AsRef<Path>,
    dir: impl AsRef<Path>,
    overwrite: bool,
) -> Result<Manifest> {
    let path = manifest_path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    generate_split(
        &manifest.config,
        manifest.first_index,
        manifest.count,
        dir,
        overwrite,
    )
}

fn prepare_dir(dir: &Path, overwrite: bool) -> Result<()> {
    let io = |e| Error::io(PathBuf::from(dir), e);
    if dir.exists() {
        let occupied = std::fs::read_dir(dir).map_err(io)?.next().is_some();
        if occupied && !overwrite {
            return Err(Error::Dataset(format!(
                "{} already exists and is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
    } else {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    Ok(())
}
