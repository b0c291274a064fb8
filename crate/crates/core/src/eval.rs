//! Distribution metrics (FID, KID), the two synthesis manners, image grids,
//! and the metrics report.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stack, Domain, ImageSample, PairedDataset};
use crate::error::{contract, Error, Result};
use crate::nets::{standard_normal, FeatureExtractor, ModelBundle};
use crate::tensor::Array;

/// Eigenvalues below this are treated as zero in the FID square root.
pub const SQRT_EPS: f64 = 1e-10;

const CHUNK: usize = 64;

/// Mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FeatureMoments {
    /// `feats` is `[N, f]` with `N ≥ 2`.
    pub fn from_features(feats: &Array<f32>) -> Result<Self> {
        let (n, f) = (feats.rows(), feats.last_dim());
        if feats.shape().len() != 2 || n < 2 {
            return Err(contract(format!(
                "moments need at least 2 feature rows, got shape {:?}",
                feats.shape()
            )));
        }
        let x = DMatrix::from_row_iterator(n, f, feats.data().iter().map(|&v| v as f64));
        let mean = x.row_mean().transpose();
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok(Self { mean, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Moments of `F_eval` features over `images`.
pub fn extract_moments(
    images: &[ImageSample],
    extractor: &dyn FeatureExtractor,
) -> Result<FeatureMoments> {
    if images.len() < 2 {
        return Err(contract("moments need at least 2 images"));
    }
    FeatureMoments::from_features(&embed(images, extractor)?)
}

/// `[N, f]` features of `images`, computed in chunks.
pub fn embed(images: &[ImageSample], extractor: &dyn FeatureExtractor) -> Result<Array<f32>> {
    if images.is_empty() {
        return Err(contract("no images to embed"));
    }
    let mut data = Vec::new();
    let mut dim = 0;
    for c in images.chunks(CHUNK) {
        let refs: Vec<&ImageSample> = c.iter().collect();
        let f = extractor.embed(&stack(&refs)?);
        dim = f.last_dim();
        data.extend_from_slice(f.data());
    }
    Ok(Array::from_vec(&[images.len(), dim], data))
}

fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax().max(1.0);
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < -1e-6 * scale) {
        return Err(Error::Numeric(format!(
            "matrix square root of a non-PSD matrix: eigenvalue {bad:.3e} (largest magnitude {scale:.3e})"
        )));
    }
    let roots = eig
        .eigenvalues
        .map(|l| if l < SQRT_EPS { 0.0 } else { l.sqrt() });
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussian fits.
///
/// The trace of `(Σ1 Σ2)^{1/2}` is taken as the trace of the square root of the
/// symmetric product `Σ1^{1/2} Σ2 Σ1^{1/2}`, which has the same eigenvalues.
pub fn fid(m1: &FeatureMoments, m2: &FeatureMoments) -> Result<f64> {
    if m1.dim() != m2.dim() {
        return Err(contract(format!(
            "feature dims differ: {} vs {}",
            m1.dim(),
            m2.dim()
        )));
    }
    let diff = &m1.mean - &m2.mean;
    let s1 = sym_sqrt(&m1.cov)?;
    let cross = sym_sqrt(&(&s1 * &m2.cov * &s1))?.trace();
    let value = diff.norm_squared() + m1.cov.trace() + m2.cov.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("FID is not finite ({value})")));
    }
    Ok(value.max(0.0))
}

fn poly_kernel(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let f = x.ncols() as f64;
    (x * y.transpose()).map(|v| (v / f + 1.0).powi(3))
}

fn to_matrix(feats: &Array<f32>) -> DMatrix<f64> {
    DMatrix::from_row_iterator(
        feats.rows(),
        feats.last_dim(),
        feats.data().iter().map(|&v| v as f64),
    )
}

/// Unbiased MMD² with the cubic polynomial kernel `(xᵀy / f + 1)³`.
pub fn kid(feats1: &Array<f32>, feats2: &Array<f32>) -> Result<f64> {
    if feats1.shape().len() != 2 || feats2.shape().len() != 2 {
        return Err(contract("kid expects [N, f] feature sets"));
    }
    if feats1.last_dim() != feats2.last_dim() {
        return Err(contract(format!(
            "feature dims differ: {} vs {}",
            feats1.last_dim(),
            feats2.last_dim()
        )));
    }
    let (m, n) = (feats1.rows(), feats2.rows());
    if m < 2 || n < 2 {
        return Err(contract("kid needs at least 2 samples per set"));
    }
    let (x, y) = (to_matrix(feats1), to_matrix(feats2));
    let off_diag_mean = |k: DMatrix<f64>, n: usize| (k.sum() - k.trace()) / (n * (n - 1)) as f64;
    let kxx = off_diag_mean(poly_kernel(&x, &x), m);
    let kyy = off_diag_mean(poly_kernel(&y, &y), n);
    let kxy = poly_kernel(&x, &y).mean();
    Ok(kxx + kyy - 2.0 * kxy)
}

/// How latent codes are drawn when sampling the target generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthesisManner {
    /// Both codes from `N(0, I)`.
    Rand,
    /// Content codes from encoded source images, appearance codes from
    /// encoded target images (posterior samples).
    Syn,
}

impl fmt::Display for SynthesisManner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rand => "rand",
            Self::Syn => "syn",
        })
    }
}

impl FromStr for SynthesisManner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rand" => Ok(Self::Rand),
            "syn" => Ok(Self::Syn),
            other => Err(Error::Config(format!(
                "unknown synthesis manner {other:?} (expected rand or syn)"
            ))),
        }
    }
}

/// Draws `n` target-domain images from the bundle's target generator.
pub fn synthesize(
    bundle: &ModelBundle,
    manner: SynthesisManner,
    n: usize,
    seed: u64,
    dataset: Option<&PairedDataset>,
) -> Result<Vec<ImageSample>> {
    let d = match (manner, dataset) {
        (SynthesisManner::Syn, None) => {
            return Err(contract("Syn synthesis needs access to the paired dataset"))
        }
        (_, d) => d,
    };
    let arch = &bundle.arch;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let b = (n - out.len()).min(CHUNK);
        let (zc, za) = match manner {
            SynthesisManner::Rand => (
                standard_normal(&[b, arch.content_dim], &mut rng),
                standard_normal(&[b, arch.appearance_dim], &mut rng),
            ),
            SynthesisManner::Syn => {
                let d = d.expect("checked above");
                let src: Vec<&ImageSample> = (0..b)
                    .map(|_| &d.source_pool()[rng.random_range(0..d.n_source())])
                    .collect();
                let tar: Vec<&ImageSample> = (0..b)
                    .map(|_| &d.target_pool()[rng.random_range(0..d.n_target())])
                    .collect();
                let qc = bundle.encode_content_batch(&src)?;
                let qa = bundle.encode_appearance_batch(&tar, Domain::Target)?;
                (qc.sample(&mut rng), qa.sample(&mut rng))
            }
        };
        let imgs = bundle.generate_batch(&zc, &za, Domain::Target)?;
        out.extend(imgs);
    }
    Ok(out)
}

/// Which real images the generated set was compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceKind {
    /// A held-out pool of target-domain images not used for training.
    Heldout,
    /// The training target pool.
    Target,
    /// The chroma-augmented training target pool (used when `N_tar < 100`).
    Augmented,
}

/// One row of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub manner: SynthesisManner,
    pub metric: String,
    pub value: f64,
    pub n_gen: usize,
    pub n_real: usize,
    pub extractor_id: String,
    pub seed: u64,
    pub reference: ReferenceKind,
}

/// FID and KID of `generated` against `real`, both embedded with `extractor`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    generated: &[ImageSample],
    real: &[ImageSample],
    extractor: &dyn FeatureExtractor,
    manner: SynthesisManner,
    seed: u64,
    reference: ReferenceKind,
) -> Result<Vec<MetricRow>> {
    let fg = embed(generated, extractor)?;
    let fr = embed(real, extractor)?;
    let fid_value = fid(
        &FeatureMoments::from_features(&fg)?,
        &FeatureMoments::from_features(&fr)?,
    )?;
    let kid_value = kid(&fg, &fr)?;
    let row = |metric: &str, value: f64| MetricRow {
        manner,
        metric: metric.to_string(),
        value,
        n_gen: generated.len(),
        n_real: real.len(),
        extractor_id: extractor.id().to_string(),
        seed,
        reference,
    };
    Ok(vec![row("FID", fid_value), row("KID", kid_value)])
}

pub fn fid_of(
    generated: &[ImageSample],
    real: &[ImageSample],
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    fid(
        &extract_moments(generated, extractor)?,
        &extract_moments(real, extractor)?,
    )
}

/// Tab-separated report with a header line.
pub fn write_report(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut s =
        String::from("manner\tmetric\tvalue\tn_gen\tn_real\textractor_id\tseed\treference\n");
    for r in rows {
        let reference = serde_json::to_value(r.reference).expect("unit enum");
        s.push_str(&format!(
            "{}\t{}\t{:.9e}\t{}\t{}\t{}\t{}\t{}\n",
            r.manner,
            r.metric,
            r.value,
            r.n_gen,
            r.n_real,
            r.extractor_id,
            r.seed,
            reference.as_str().unwrap_or_default()
        ));
    }
    fs::write(path, s)?;
    Ok(())
}

/// Tiles the first `rows × cols` images row-major into one PNG.
pub fn emit_grid(images: &[ImageSample], rows: usize, cols: usize, path: &Path) -> Result<()> {
    if rows == 0 || cols == 0 || rows * cols > images.len() {
        return Err(contract(format!(
            "a {rows}×{cols} grid needs {} images, got {}",
            rows * cols,
            images.len()
        )));
    }
    let (h, w) = (images[0].height() as u32, images[0].width() as u32);
    let mut grid = RgbImage::new(w * cols as u32, h * rows as u32);
    for (k, img) in images.iter().take(rows * cols).enumerate() {
        if img.height() as u32 != h || img.width() as u32 != w {
            return Err(contract("grid images must share one size"));
        }
        let (r, c) = ((k / cols) as u32, (k % cols) as u32);
        image::imageops::replace(
            &mut grid,
            &img.to_rgb_image(),
            (c * w) as i64,
            (r * h) as i64,
        );
    }
    grid.save(path)?;
    Ok(())
}
