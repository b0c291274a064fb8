//! Image pools, the cross-domain pairing manifest, and batch helpers.

mod augment;

pub use augment::{
    augment_target_pool, lab_chroma_shift, lab_to_rgb, random_image as augment_random_image,
    rgb_to_lab, AugmentationConfig, LAB_AB_LIMIT,
};

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::Array;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// An `(H, W, 3)` channels-last image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pixels: Array<f32>,
    pub domain: Domain,
}

impl ImageSample {
    pub fn new(pixels: Array<f32>, domain: Domain) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(contract(format!("image must be (H, W, 3), got {s:?}")));
        }
        if pixels.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(contract("pixel values must lie in [-1, 1]"));
        }
        Ok(Self { pixels, domain })
    }

    /// Clamps into `[-1, 1]` instead of rejecting out-of-range values.
    pub fn from_clamped(pixels: Array<f32>, domain: Domain) -> Self {
        let pixels = pixels.map(|v| v.clamp(-1.0, 1.0));
        Self::new(pixels, domain).expect("clamped image satisfies range contract")
    }

    pub fn pixels(&self) -> &Array<f32> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn size(&self) -> usize {
        self.height()
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        let (h, w) = (self.height(), self.width());
        let d = self.pixels.data();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = (y as usize * w + x as usize) * 3;
            let c = |v: f32| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
            Rgb([c(d[i]), c(d[i + 1]), c(d[i + 2])])
        })
    }

    /// Converts an RGB raster, resizing to `size × size` when needed.
    pub fn from_rgb_image(img: &RgbImage, size: usize, domain: Domain) -> Self {
        let resized;
        let img = if img.width() as usize != size || img.height() as usize != size {
            resized = image::imageops::resize(img, size as u32, size as u32, FilterType::Triangle);
            &resized
        } else {
            img
        };
        let data = img
            .pixels()
            .flat_map(|p| p.0)
            .map(|v| v as f32 / 127.5 - 1.0)
            .collect();
        Self::from_clamped(Array::from_vec(&[size, size, 3], data), domain)
    }

    pub fn load(path: &Path, size: usize, domain: Domain) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(Self::from_rgb_image(&img.to_rgb8(), size, domain))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb_image().save(path)?;
        Ok(())
    }
}

/// Stacks images into an `[N, H, W, 3]` batch.
pub fn stack(images: &[&ImageSample]) -> Result<Array<f32>> {
    if images.is_empty() {
        return Err(contract("empty image batch"));
    }
    let shape = images[0].pixels.shape();
    if images.iter().any(|im| im.pixels.shape() != shape) {
        return Err(contract("images in one batch must share (H, W)"));
    }
    let arrays: Vec<&Array<f32>> = images.iter().map(|im| &im.pixels).collect();
    Ok(Array::stack(&arrays))
}

/// Splits an `[N, H, W, 3]` batch back into samples, clamping into range.
pub fn unstack(batch: &Array<f32>, domain: Domain) -> Vec<ImageSample> {
    batch
        .unstack()
        .into_iter()
        .map(|a| ImageSample::from_clamped(a, domain))
        .collect()
}

/// Source pool, few-shot target pool, and the injective map from target index
/// to the index of its source counterpart.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    source_pool: Vec<ImageSample>,
    target_pool: Vec<ImageSample>,
    kappa: Vec<usize>,
}

impl PairedDataset {
    pub fn new(
        source_pool: Vec<ImageSample>,
        target_pool: Vec<ImageSample>,
        kappa: Vec<usize>,
    ) -> Result<Self> {
        if kappa.len() != target_pool.len() {
            return Err(Error::Manifest(format!(
                "{} target samples but {} correspondences",
                target_pool.len(),
                kappa.len()
            )));
        }
        if target_pool.len() > source_pool.len() {
            return Err(Error::Manifest(format!(
                "target pool ({}) larger than source pool ({})",
                target_pool.len(),
                source_pool.len()
            )));
        }
        if let Some(&j) = kappa.iter().find(|&&j| j >= source_pool.len()) {
            return Err(Error::Manifest(format!("source index {j} out of range")));
        }
        let distinct: HashSet<_> = kappa.iter().collect();
        if distinct.len() != kappa.len() {
            return Err(Error::Manifest("pairing is not injective".into()));
        }
        let Some(first) = source_pool.first().or(target_pool.first()) else {
            return Err(Error::Manifest("empty dataset".into()));
        };
        let shape = first.pixels.shape().to_vec();
        if source_pool
            .iter()
            .chain(&target_pool)
            .any(|s| s.pixels.shape() != shape.as_slice())
        {
            return Err(contract("all samples must share (H, W)"));
        }
        if target_pool.len() * 10 > source_pool.len() {
            log::warn!(
                "few-shot assumption weak: N_tar = {} > N_src / 10 = {}",
                target_pool.len(),
                source_pool.len() / 10
            );
        }
        Ok(Self {
            source_pool,
            target_pool,
            kappa,
        })
    }

    pub fn source_pool(&self) -> &[ImageSample] {
        &self.source_pool
    }

    pub fn target_pool(&self) -> &[ImageSample] {
        &self.target_pool
    }

    pub fn n_source(&self) -> usize {
        self.source_pool.len()
    }

    pub fn n_target(&self) -> usize {
        self.target_pool.len()
    }

    pub fn image_size(&self) -> usize {
        self.source_pool[0].size()
    }

    pub fn kappa(&self, target_index: usize) -> Result<usize> {
        self.kappa
            .get(target_index)
            .copied()
            .ok_or_else(|| contract(format!("unknown target index {target_index}")))
    }

    pub fn kappa_map(&self) -> &[usize] {
        &self.kappa
    }

    /// Source counterpart of target `i`.
    pub fn paired_source(&self, target_index: usize) -> Result<&ImageSample> {
        Ok(&self.source_pool[self.kappa(target_index)?])
    }

    /// Keeps the first `n` targets (and their pairs).
    pub fn with_target_subset(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n_target() {
            return Err(contract(format!(
                "cannot take {n} of {} targets",
                self.n_target()
            )));
        }
        Self::new(
            self.source_pool.clone(),
            self.target_pool[..n].to_vec(),
            self.kappa[..n].to_vec(),
        )
    }
}

/// One `(target_file, source_file)` manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub target: String,
    pub source: String,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(t), Some(s), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Manifest(format!(
                "line {}: expected <target>\\t<source>",
                lineno + 1
            )));
        };
        if !seen.insert(t.to_string()) {
            return Err(Error::Manifest(format!("duplicate target file {t}")));
        }
        rows.push(ManifestRow {
            target: t.to_string(),
            source: s.to_string(),
        });
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let text: String = rows
        .iter()
        .map(|r| format!("{}\t{}\n", r.target, r.source))
        .collect();
    fs::write(path, text)?;
    Ok(())
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| {
            matches!(
                e.to_ascii_lowercase().as_str(),
                "png" | "bmp" | "tif" | "tiff" | "ppm" | "pnm"
            )
        })
        .unwrap_or(false)
}

/// Sorted image file names of a directory.
pub fn list_images(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Load {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut names = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.is_file() && is_image_file(&path) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.push(name.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Loads every image of `source_dir` as the source pool and the targets named
/// in `manifest`, in manifest order.
pub fn load_dataset(
    source_dir: &Path,
    target_dir: &Path,
    manifest: &Path,
    image_size: usize,
) -> Result<PairedDataset> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::Load {
        path: manifest.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rows = parse_manifest(&text)?;
    let source_names = list_images(source_dir)?;
    let index: HashMap<&str, usize> = source_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();

    let mut kappa = Vec::with_capacity(rows.len());
    let mut target_pool = Vec::with_capacity(rows.len());
    for row in &rows {
        let target_path = target_dir.join(&row.target);
        if !target_path.is_file() {
            return Err(missing(target_path));
        }
        let Some(&j) = index.get(row.source.as_str()) else {
            return Err(missing(source_dir.join(&row.source)));
        };
        kappa.push(j);
        target_pool.push(ImageSample::load(&target_path, image_size, Domain::Target)?);
    }
    let source_pool = source_names
        .iter()
        .map(|n| ImageSample::load(&source_dir.join(n), image_size, Domain::Source))
        .collect::<Result<Vec<_>>>()?;
    PairedDataset::new(source_pool, target_pool, kappa)
}

fn missing(path: PathBuf) -> Error {
    Error::Load {
        path,
        reason: "file not found".into(),
    }
}

/// Loads every image of a directory (e.g. a held-out evaluation pool).
pub fn load_pool(dir: &Path, image_size: usize, domain: Domain) -> Result<Vec<ImageSample>> {
    list_images(dir)?
        .iter()
        .map(|n| ImageSample::load(&dir.join(n), image_size, domain))
        .collect()
}

/// `n` indices drawn uniformly with replacement from `0..len`.
pub fn sample_indices<R: Rng + ?Sized>(rng: &mut R, len: usize, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..len)).collect()
}

/// `n` distinct indices from `0..len` (all of them, shuffled, when `n >= len`).
pub fn sample_distinct<R: Rng + ?Sized>(rng: &mut R, len: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    idx.truncate(n.min(len));
    idx
}
