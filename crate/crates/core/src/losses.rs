//! Loss terms of both training stages. Every function builds on graph
//! variables so gradients flow to whichever inputs are tracked.
//!
//! Reconstruction-style terms (image, feature, latent, relation) use the mean
//! absolute deviation; content distances are Euclidean.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{ImageSample, PairedDataset};
use crate::error::{contract, Result};
use crate::nets::{ModelBundle, PosteriorVars};
use crate::tensor::{Array, Float, Var};

fn same_shape<T: Float>(a: Var<'_, T>, b: Var<'_, T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(contract(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn mean_abs_diff<'g, T: Float>(a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
    a.sub(b).abs().mean()
}

/// Mean absolute pixel deviation between a reconstruction and its target.
pub fn image_recon_loss<'g, T: Float>(x_hat: Var<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape(x_hat, x, "image_recon_loss")?;
    Ok(mean_abs_diff(x_hat, x))
}

/// Closed-form `KL(q || N(0, I))` summed over dimensions, averaged over the
/// batch: `½ Σ (μ² + e^{logvar} − 1 − logvar)`.
pub fn kl_loss<'g, T: Float>(q: &PosteriorVars<'g, T>) -> Result<Var<'g, T>> {
    same_shape(q.mean, q.logvar, "kl_loss")?;
    if !q.mean.value().all_finite() || !q.logvar.value().all_finite() {
        return Err(contract("kl_loss: non-finite posterior"));
    }
    let per_dim = q
        .mean
        .sqr()
        .add(q.logvar.exp())
        .sub(q.logvar)
        .add_scalar(-1.0);
    Ok(per_dim.sum_last().mean().scale(0.5))
}

/// Mean absolute deviation between the feature maps of two image batches.
pub fn perceptual_loss<'g, T: Float>(
    x1: Var<'g, T>,
    x2: Var<'g, T>,
    features: impl Fn(Var<'g, T>) -> Var<'g, T>,
) -> Result<Var<'g, T>> {
    same_shape(x1, x2, "perceptual_loss")?;
    Ok(mean_abs_diff(features(x1), features(x2)))
}

/// Mean absolute deviation between a re-encoded appearance code and the code
/// the image was generated from.
pub fn appearance_recon_loss<'g, T: Float>(z_rec: Var<'g, T>, z: Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape(z_rec, z, "appearance_recon_loss")?;
    Ok(mean_abs_diff(z_rec, z))
}

/// Discriminator hinge loss: `E[max(0, 1 − D(real))] + E[max(0, 1 + D(fake))]`.
pub fn hinge_d_loss<'g, T: Float>(
    scores_real: Var<'g, T>,
    scores_fake: Var<'g, T>,
) -> Result<Var<'g, T>> {
    if scores_real.value().is_empty() || scores_fake.value().is_empty() {
        return Err(contract("hinge_d_loss: empty score batch"));
    }
    let real = scores_real.neg().add_scalar(1.0).relu().mean();
    let fake = scores_fake.add_scalar(1.0).relu().mean();
    Ok(real.add(fake))
}

/// Generator hinge loss: `−E[D(fake)]`.
pub fn hinge_g_loss<'g, T: Float>(scores_fake: Var<'g, T>) -> Result<Var<'g, T>> {
    if scores_fake.value().is_empty() {
        return Err(contract("hinge_g_loss: empty score batch"));
    }
    Ok(scores_fake.mean().neg())
}

/// Anything that can produce a deterministic content code for an image.
pub trait ContentEncoder {
    fn content_code(&self, x: &ImageSample) -> Result<Vec<f32>>;
}

impl ContentEncoder for ModelBundle {
    fn content_code(&self, x: &ImageSample) -> Result<Vec<f32>> {
        Ok(self.encode_content(x)?.mean.into_vec())
    }
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt() as f32
}

/// Content distance of a cross-domain pair: the Euclidean distance between
/// the content codes of `x_src_j` and of the source counterpart of target
/// `target_index`.
pub fn content_distance(
    encoder: &impl ContentEncoder,
    x_src_j: &ImageSample,
    target_index: usize,
    d: &PairedDataset,
) -> Result<f32> {
    let paired = d.paired_source(target_index)?;
    Ok(euclidean(
        &encoder.content_code(x_src_j)?,
        &encoder.content_code(paired)?,
    ))
}

/// Posterior-mean content codes of the whole source pool, computed once so
/// distance targets are cheap and deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentCodes {
    means: Array<f32>,
}

impl ContentCodes {
    pub fn new(means: Array<f32>) -> Self {
        Self { means }
    }

    pub fn compute(bundle: &ModelBundle, d: &PairedDataset, chunk: usize) -> Result<Self> {
        let dim = bundle.arch.content_dim;
        let mut data = Vec::with_capacity(d.n_source() * dim);
        for part in d.source_pool().chunks(chunk.max(1)) {
            let refs: Vec<&ImageSample> = part.iter().collect();
            data.extend(bundle.encode_content_batch(&refs)?.mean.into_vec());
        }
        Ok(Self::new(Array::from_vec(&[d.n_source(), dim], data)))
    }

    pub fn code(&self, j: usize) -> &[f32] {
        let dim = self.means.last_dim();
        &self.means.data()[j * dim..(j + 1) * dim]
    }

    pub fn len(&self) -> usize {
        self.means.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.means.last_dim()
    }

    pub fn as_array(&self) -> &Array<f32> {
        &self.means
    }

    /// `‖code(j) − code(κ(i))‖`.
    pub fn pair_distance(
        &self,
        source_index: usize,
        target_index: usize,
        d: &PairedDataset,
    ) -> Result<f32> {
        if source_index >= self.len() {
            return Err(contract(format!("unknown source index {source_index}")));
        }
        let k = d.kappa(target_index)?;
        Ok(euclidean(self.code(source_index), self.code(k)))
    }
}

/// A cross-domain training pair for the relation network: source image `j`
/// against target image `i`, with `j ≠ κ(i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelationPair {
    pub source: usize,
    pub target: usize,
}

/// Mean absolute deviation between relation scores and content distances.
/// `scores[k]` must belong to `pairs[k]`.
pub fn relation_train_loss<'g, T: Float>(
    scores: Var<'g, T>,
    pairs: &[RelationPair],
    d: &PairedDataset,
    codes: &ContentCodes,
) -> Result<Var<'g, T>> {
    if pairs.is_empty() || scores.value().len() != pairs.len() {
        return Err(contract("relation_train_loss: one score per pair required"));
    }
    let mut targets = Vec::with_capacity(pairs.len());
    for p in pairs {
        if d.kappa(p.target)? == p.source {
            return Err(contract(format!(
                "relation_train_loss: pair ({}, {}) is the annotated correspondence",
                p.source, p.target
            )));
        }
        targets.push(T::lit(codes.pair_distance(p.source, p.target, d)? as f64));
    }
    let g = scores.graph();
    let t = g.constant(Array::from_vec(&scores.shape(), targets));
    Ok(mean_abs_diff(scores, t))
}

/// Mean absolute deviation between relation scores on generated pairs and the
/// Euclidean distance of the content codes that generated them. Row `k` of
/// `source_codes`/`target_codes` holds `z_c_i`/`z_c_j` for pair `k`, and
/// `indices[k] = (i, j)` identifies the codes so `i = j` can be rejected.
pub fn relation_gen_loss<'g, T: Float>(
    scores: Var<'g, T>,
    source_codes: &Array<T>,
    target_codes: &Array<T>,
    indices: &[(usize, usize)],
) -> Result<Var<'g, T>> {
    let n = indices.len();
    if n == 0 || scores.value().len() != n || source_codes.rows() != n || target_codes.rows() != n {
        return Err(contract(
            "relation_gen_loss: scores, codes and indices must pair up",
        ));
    }
    if source_codes.shape() != target_codes.shape() {
        return Err(contract("relation_gen_loss: code dims differ"));
    }
    if let Some((i, _)) = indices.iter().find(|(i, j)| i == j) {
        return Err(contract(format!(
            "relation_gen_loss: pair uses code {i} twice"
        )));
    }
    let dim = source_codes.last_dim();
    let targets: Vec<T> = source_codes
        .data()
        .chunks(dim)
        .zip(target_codes.data().chunks(dim))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum::<T>()
                .sqrt()
        })
        .collect();
    let g = scores.graph();
    let t = g.constant(Array::from_vec(&scores.shape(), targets));
    Ok(mean_abs_diff(scores, t))
}

/// Training phase a [`LossReport`] belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Stage1,
    Relation,
    Stage2,
    Baseline,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Stage1 => "stage1",
            Phase::Relation => "relation",
            Phase::Stage2 => "stage2",
            Phase::Baseline => "baseline",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage1" | "1" => Ok(Phase::Stage1),
            "relation" => Ok(Phase::Relation),
            "stage2" | "2" => Ok(Phase::Stage2),
            "baseline" => Ok(Phase::Baseline),
            other => Err(crate::Error::Config(format!("unknown phase {other:?}"))),
        }
    }
}

/// Loss term names as they appear in reports.
pub mod names {
    pub const IR_SRC: &str = "ir_src";
    pub const KL_SRC: &str = "kl_src";
    pub const PERCEPTUAL: &str = "p";
    pub const AR_SRC: &str = "ar_src";
    pub const IA_D_SRC: &str = "ia_d_src";
    pub const IA_G_SRC: &str = "ia_g_src";
    pub const RT_TAR: &str = "rt_tar";
    pub const IR_TAR: &str = "ir_tar";
    pub const KL_TAR: &str = "kl_tar";
    pub const AR_TAR: &str = "ar_tar";
    pub const IA_D_TAR: &str = "ia_d_tar";
    pub const IA_G_TAR: &str = "ia_g_tar";
    pub const RG_TAR: &str = "rg_tar";
    pub const P_TAR: &str = "p_tar";
}

/// Values of every active loss term at one optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub phase: Phase,
    terms: Vec<(String, f64)>,
}

impl LossReport {
    pub fn new(phase: Phase, step: u64) -> Self {
        Self {
            step,
            phase,
            terms: Vec::new(),
        }
    }

    /// Records a term; fails on duplicates and on non-finite values.
    pub fn record(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(crate::Error::NonFinite {
                term: name.to_string(),
                step: self.step,
            });
        }
        if self.get(name).is_some() {
            return Err(contract(format!("loss term {name} recorded twice")));
        }
        self.terms.push((name.to_string(), value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.terms.iter().map(|(n, _)| n.as_str())
    }

    pub fn terms(&self) -> &[(String, f64)] {
        &self.terms
    }

    /// One log line: `step=<n> stage=<phase> name=value ...`.
    pub fn to_line(&self) -> String {
        let mut s = format!("step={} stage={}", self.step, self.phase);
        for (n, v) in &self.terms {
            s.push_str(&format!(" {n}={v:.9e}"));
        }
        s
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let mut fields = line.split_whitespace();
        let mut take = |key: &str| -> Result<String> {
            fields
                .next()
                .and_then(|f| f.strip_prefix(key))
                .and_then(|f| f.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| contract(format!("loss line missing {key}: {line:?}")))
        };
        let step = take("step")?
            .parse()
            .map_err(|_| contract(format!("bad step in {line:?}")))?;
        let phase = take("stage")?.parse()?;
        let mut report = Self::new(phase, step);
        for f in line.split_whitespace().skip(2) {
            let (n, v) = f
                .split_once('=')
                .ok_or_else(|| contract(format!("bad field {f:?}")))?;
            let v: f64 = v
                .parse()
                .map_err(|_| contract(format!("bad value {f:?}")))?;
            report.record(n, v)?;
        }
        Ok(report)
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}
