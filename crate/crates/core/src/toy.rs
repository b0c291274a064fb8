//! Synthetic paired-domain task: source images are outline drawings of
//! randomly posed shapes on a light background, target images are the same shapes filled
//! with a warm striped texture. Content is (class, position, scale, rotation);
//! appearance is stroke colour in the source domain and fill colour in the
//! target domain.

use std::collections::VecDeque;
use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use palette::{FromColor, Hsv, Srgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    sample_distinct, write_manifest, Domain, ImageSample, ManifestRow, PairedDataset,
};
use crate::error::{Error, Result};
use crate::tensor::Array;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Circle,
    Triangle,
    Square,
    Cross,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [Self::Circle, Self::Triangle, Self::Square, Self::Cross];
}

/// Content parameters of one toy image, in units of the image side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeParams {
    pub class: ShapeClass,
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
    pub angle: f32,
}

impl ShapeParams {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            class: ShapeClass::ALL[rng.random_range(0..4)],
            cx: rng.random_range(0.36..0.64),
            cy: rng.random_range(0.36..0.64),
            radius: rng.random_range(0.22..0.34),
            angle: rng.random_range(0.0..PI / 2.0),
        }
    }

    /// Whether the point `(x, y)` (image-side units) lies inside the shape.
    pub fn contains(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (
            (c * dx + s * dy) / self.radius,
            (-s * dx + c * dy) / self.radius,
        );
        match self.class {
            ShapeClass::Circle => dx * dx + dy * dy <= self.radius * self.radius,
            ShapeClass::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            ShapeClass::Cross => {
                (u.abs() <= 1.0 && v.abs() <= 0.35) || (u.abs() <= 0.35 && v.abs() <= 1.0)
            }
            ShapeClass::Triangle => {
                let verts = [(0.0f32, -1.0f32), (0.866, 0.5), (-0.866, 0.5)];
                let edge = |(ax, ay): (f32, f32), (bx, by): (f32, f32)| {
                    (bx - ax) * (v - ay) - (by - ay) * (u - ax)
                };
                let e = [
                    edge(verts[0], verts[1]),
                    edge(verts[1], verts[2]),
                    edge(verts[2], verts[0]),
                ];
                e.iter().all(|&w| w >= 0.0) || e.iter().all(|&w| w <= 0.0)
            }
        }
    }

    /// Filled mask sampled at pixel centres, row-major.
    pub fn mask(&self, size: usize) -> Vec<bool> {
        let s = size as f32;
        (0..size * size)
            .map(|i| {
                let (y, x) = (i / size, i % size);
                self.contains((x as f32 + 0.5) / s, (y as f32 + 0.5) / s)
            })
            .collect()
    }
}

/// Mask pixels within `width` 4-neighbour steps of the outside.
fn boundary(mask: &[bool], size: usize, width: usize) -> Vec<bool> {
    let mut inner = mask.to_vec();
    for _ in 0..width {
        let prev = inner.clone();
        let inside = |y: isize, x: isize| {
            y >= 0
                && x >= 0
                && y < size as isize
                && x < size as isize
                && prev[y as usize * size + x as usize]
        };
        for (i, v) in inner.iter_mut().enumerate() {
            let (y, x) = ((i / size) as isize, (i % size) as isize);
            *v = prev[i]
                && inside(y - 1, x)
                && inside(y + 1, x)
                && inside(y, x - 1)
                && inside(y, x + 1);
        }
    }
    mask.iter().zip(&inner).map(|(&m, &i)| m && !i).collect()
}

/// Outline width in pixels for an image side.
pub fn stroke_width(size: usize) -> usize {
    ((size + 8) / 12).max(1)
}

/// Background level of both domains: light grey rather than the `tanh`
/// asymptote, so a bounded generator can match it exactly.
pub const BACKGROUND: f32 = 0.85;

fn rgb_signed(c: Srgb<f32>) -> [f32; 3] {
    [c.red * 2.0 - 1.0, c.green * 2.0 - 1.0, c.blue * 2.0 - 1.0]
}

/// Outline of `shape` in a random dark stroke colour on the background.
pub fn render_source<R: Rng + ?Sized>(
    shape: &ShapeParams,
    size: usize,
    rng: &mut R,
) -> ImageSample {
    let stroke = [
        rng.random_range(-1.0..-0.7f32),
        rng.random_range(-1.0..-0.7f32),
        rng.random_range(-1.0..-0.7f32),
    ];
    let edge = boundary(&shape.mask(size), size, stroke_width(size));
    let mut px = Vec::with_capacity(size * size * 3);
    for &on in &edge {
        px.extend_from_slice(if on { &stroke } else { &[BACKGROUND; 3] });
    }
    ImageSample::from_clamped(Array::from_vec(&[size, size, 3], px), Domain::Source)
}

/// Filled `shape` with a warm hue and diagonal stripes on the background.
pub fn render_target<R: Rng + ?Sized>(
    shape: &ShapeParams,
    size: usize,
    rng: &mut R,
) -> ImageSample {
    let hue = rng.random_range(0.0..45.0f32);
    let sat = rng.random_range(0.6..0.95f32);
    let val = rng.random_range(0.55..0.9f32);
    let base = Srgb::from_color(Hsv::new(hue, sat, val));
    let dark = Srgb::from_color(Hsv::new(hue, sat, val * 0.6));
    let (base, dark) = (rgb_signed(base), rgb_signed(dark));
    let mask = shape.mask(size);
    let period = (size / 8).max(2);
    let mut px = Vec::with_capacity(size * size * 3);
    for (i, &on) in mask.iter().enumerate() {
        let (y, x) = (i / size, i % size);
        let c = if !on {
            [BACKGROUND; 3]
        } else if ((x + y) / period) % 2 == 0 {
            base
        } else {
            dark
        };
        px.extend_from_slice(&c);
    }
    ImageSample::from_clamped(Array::from_vec(&[size, size, 3], px), Domain::Target)
}

/// Binary silhouette of a toy image: the region enclosed by non-background
/// pixels (4-connected flood fill of the background from the border).
pub fn silhouette(img: &ImageSample) -> Vec<bool> {
    let size = img.size();
    let d = img.pixels().data();
    let background = |i: usize| {
        d[i * 3..i * 3 + 3]
            .iter()
            .all(|&v| (v - BACKGROUND).abs() < 0.05)
    };
    let mut outside = vec![false; size * size];
    let mut queue = VecDeque::new();
    for i in 0..size {
        for p in [i, (size - 1) * size + i, i * size, i * size + size - 1] {
            if background(p) && !outside[p] {
                outside[p] = true;
                queue.push_back(p);
            }
        }
    }
    while let Some(p) = queue.pop_front() {
        let (y, x) = (p / size, p % size);
        let mut visit = |q: usize| {
            if !outside[q] && background(q) {
                outside[q] = true;
                queue.push_back(q);
            }
        };
        if y > 0 {
            visit(p - size);
        }
        if y + 1 < size {
            visit(p + size);
        }
        if x > 0 {
            visit(p - 1);
        }
        if x + 1 < size {
            visit(p + 1);
        }
    }
    outside.iter().map(|o| !o).collect()
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// In-memory toy task: the paired dataset plus a held-out pool of target
/// renderings of fresh shapes, used as the real reference for metrics.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub dataset: PairedDataset,
    pub eval_targets: Vec<ImageSample>,
    pub source_shapes: Vec<ShapeParams>,
}

impl ToyTask {
    pub fn generate(
        n_src: usize,
        n_tar: usize,
        n_eval: usize,
        size: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_tar > n_src {
            return Err(Error::Config(format!(
                "n_tar ({n_tar}) must not exceed n_src ({n_src})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let source_shapes: Vec<ShapeParams> =
            (0..n_src).map(|_| ShapeParams::random(&mut rng)).collect();
        let source_pool = source_shapes
            .iter()
            .map(|s| render_source(s, size, &mut rng))
            .collect();
        let kappa = sample_distinct(&mut rng, n_src, n_tar);
        let target_pool = kappa
            .iter()
            .map(|&j| render_target(&source_shapes[j], size, &mut rng))
            .collect();
        let eval_targets = (0..n_eval)
            .map(|_| {
                let s = ShapeParams::random(&mut rng);
                render_target(&s, size, &mut rng)
            })
            .collect();
        Ok(Self {
            dataset: PairedDataset::new(source_pool, target_pool, kappa)?,
            eval_targets,
            source_shapes,
        })
    }
}

/// File layout written by [`write_toy`].
#[derive(Debug, Clone)]
pub struct ToyLayout {
    pub source_dir: PathBuf,
    pub target_dir: PathBuf,
    pub manifest: PathBuf,
    pub eval_dir: Option<PathBuf>,
}

impl ToyLayout {
    pub fn under(root: &Path) -> Self {
        Self {
            source_dir: root.join("source"),
            target_dir: root.join("target"),
            manifest: root.join("manifest.tsv"),
            eval_dir: None,
        }
    }
}

/// Writes a toy task to `out_dir`: `source/`, `target/`, `manifest.tsv`, and
/// `target_eval/` when `n_eval > 0`.
pub fn write_toy(
    out_dir: &Path,
    n_src: usize,
    n_tar: usize,
    n_eval: usize,
    size: usize,
    seed: u64,
) -> Result<ToyLayout> {
    let task = ToyTask::generate(n_src, n_tar, n_eval, size, seed)?;
    let mut layout = ToyLayout::under(out_dir);
    fs::create_dir_all(&layout.source_dir)?;
    fs::create_dir_all(&layout.target_dir)?;
    let src_name = |j: usize| format!("src_{j:05}.png");
    for (j, img) in task.dataset.source_pool().iter().enumerate() {
        img.save(&layout.source_dir.join(src_name(j)))?;
    }
    let mut rows = Vec::new();
    for (i, img) in task.dataset.target_pool().iter().enumerate() {
        let name = format!("tar_{i:05}.png");
        img.save(&layout.target_dir.join(&name))?;
        rows.push(ManifestRow {
            target: name,
            source: src_name(task.dataset.kappa(i)?),
        });
    }
    write_manifest(&layout.manifest, &rows)?;
    if n_eval > 0 {
        let dir = out_dir.join("target_eval");
        fs::create_dir_all(&dir)?;
        for (i, img) in task.eval_targets.iter().enumerate() {
            img.save(&dir.join(format!("eval_{i:05}.png")))?;
        }
        layout.eval_dir = Some(dir);
    }
    Ok(layout)
}
