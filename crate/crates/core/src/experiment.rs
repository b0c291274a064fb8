//! End-to-end runs on the built-in toy task: one shared stage-1 model per
//! seed, then relation fitting, stage-2 variants, the target-only baseline,
//! and their metrics against a held-out reference pool.

use serde::{Deserialize, Serialize};

use crate::data::{Domain, ImageSample, PairedDataset};
use crate::error::Result;
use crate::eval::{fid_of, synthesize, SynthesisManner};
use crate::nets::{
    standard_normal, ArchConfig, ConvFeatureExtractor, FeatureExtractor, ModelBundle,
};
use crate::tensor::Array;
use crate::toy::ToyTask;
use crate::train::{
    train_baseline_s, train_relation, train_stage1, train_stage2, Ablation, RelationFit,
    Stage1Weights, Stage2Weights, TrainConfig, TrainState,
};

/// Sizes and step counts of a toy experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyProfile {
    pub arch: ArchConfig,
    pub n_source: usize,
    /// Largest target pool; smaller pools are prefixes of it.
    pub n_target: usize,
    pub n_eval: usize,
    pub n_generated: usize,
    pub stage1_steps: u64,
    pub relation_steps: u64,
    pub stage2_steps: u64,
    pub baseline_steps: u64,
    pub train: TrainConfig,
    pub metric_seed: u64,
}

impl Default for ToyProfile {
    fn default() -> Self {
        Self::small()
    }
}

impl ToyProfile {
    /// 16×16 images and narrow networks; a full seed takes a few minutes on
    /// one CPU core.
    pub fn small() -> Self {
        Self {
            arch: ArchConfig {
                image_size: 16,
                base_width: 16,
                stages: 3,
                content_dim: 32,
                appearance_dim: 4,
            },
            n_source: 2000,
            n_target: 100,
            n_eval: 1000,
            n_generated: 1000,
            stage1_steps: 2000,
            relation_steps: 500,
            stage2_steps: 1000,
            baseline_steps: 1000,
            train: TrainConfig {
                stage1_batch: 16,
                stage1_weights: Stage1Weights {
                    perceptual: 10.0,
                    ..Stage1Weights::default()
                },
                stage2_weights: Stage2Weights {
                    relation: 5.0,
                    ..Stage2Weights::default()
                },
                ..TrainConfig::default()
            },
            metric_seed: 0xE7A1,
        }
    }

    pub fn config(&self, seed: u64, ablation: Ablation) -> TrainConfig {
        TrainConfig {
            seed,
            ablation,
            stage1_steps: self.stage1_steps,
            relation_steps: self.relation_steps,
            stage2_steps: self.stage2_steps,
            ..self.train.clone()
        }
    }
}

/// The stage-1 model of one seed and the task it was trained on.
#[derive(Debug, Clone)]
pub struct Stage1Run {
    pub seed: u64,
    pub task: ToyTask,
    pub state: TrainState,
}

pub fn run_stage1(profile: &ToyProfile, seed: u64) -> Result<Stage1Run> {
    let task = ToyTask::generate(
        profile.n_source,
        profile.n_target,
        profile.n_eval,
        profile.arch.image_size,
        seed,
    )?;
    let cfg = profile.config(seed, Ablation::FULL);
    let mut state = TrainState::new(&profile.arch, &cfg)?;
    train_stage1(&mut state, &task.dataset, &cfg, profile.stage1_steps, |r| {
        if r.step % 500 == 0 {
            log::info!("seed {seed}: {r}");
        }
    })?;
    Ok(Stage1Run { seed, task, state })
}

/// A trained target model for one `(N_tar, ablation)` setting.
#[derive(Debug, Clone)]
pub struct Stage2Run {
    pub n_target: usize,
    pub ablation: Ablation,
    pub relation_fit: Option<RelationFit>,
    pub state: TrainState,
    pub dataset: PairedDataset,
}

/// Fits the relation network (unless ablated) and runs stage 2 from a copy of
/// the stage-1 state.
pub fn run_stage2(
    profile: &ToyProfile,
    base: &Stage1Run,
    n_target: usize,
    ablation: Ablation,
) -> Result<Stage2Run> {
    let dataset = base.task.dataset.with_target_subset(n_target)?;
    let cfg = profile.config(base.seed, ablation);
    let mut state = base.state.clone();
    let relation_fit = if ablation.no_relation {
        None
    } else {
        Some(train_relation(
            &mut state,
            &dataset,
            &cfg,
            profile.relation_steps,
            |_| {},
        )?)
    };
    train_stage2(&mut state, &dataset, &cfg, profile.stage2_steps, |_| {})?;
    Ok(Stage2Run {
        n_target,
        ablation,
        relation_fit,
        state,
        dataset,
    })
}

pub fn run_baseline(profile: &ToyProfile, base: &Stage1Run, n_target: usize) -> Result<TrainState> {
    let dataset = base.task.dataset.with_target_subset(n_target)?;
    let cfg = profile.config(base.seed, Ablation::FULL);
    train_baseline_s(
        dataset.target_pool(),
        &profile.arch,
        &cfg,
        profile.baseline_steps,
        |_| {},
    )
}

pub fn metric_extractor(profile: &ToyProfile) -> ConvFeatureExtractor {
    ConvFeatureExtractor::metric(profile.metric_seed)
}

/// FID of `manner` samples from `bundle` against the held-out pool.
pub fn heldout_fid(
    profile: &ToyProfile,
    bundle: &ModelBundle,
    manner: SynthesisManner,
    dataset: Option<&PairedDataset>,
    reference: &[ImageSample],
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    let generated = synthesize(
        bundle,
        manner,
        profile.n_generated,
        profile.metric_seed,
        dataset,
    )?;
    fid_of(&generated, reference, extractor)
}

fn mean_feature_distance(
    bundle: &ModelBundle,
    a: &[ImageSample],
    b: &[ImageSample],
) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (fx, fy) = (
            bundle.perceptual_features(x)?,
            bundle.perceptual_features(y)?,
        );
        let d: f64 = fx
            .data()
            .iter()
            .zip(fy.data())
            .map(|(p, q)| ((p - q) as f64).powi(2))
            .sum();
        total += d.sqrt();
    }
    Ok(total / a.len() as f64)
}

/// Ratio of the perceptual change caused by swapping appearance codes to the
/// change caused by swapping content codes, on the source generator.
///
/// Content codes are posterior means of `n` random source images; appearance
/// codes are drawn from `N(0, I)`.
pub fn disentanglement_ratio(
    bundle: &ModelBundle,
    dataset: &PairedDataset,
    n: usize,
    seed: u64,
) -> Result<f64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let idx = crate::data::sample_distinct(&mut rng, dataset.n_source(), 2 * n);
    let imgs: Vec<&ImageSample> = idx.iter().map(|&j| &dataset.source_pool()[j]).collect();
    let codes = bundle.encode_content_batch(&imgs)?.mean;
    let d_c = bundle.arch.content_dim;
    let c1 = codes
        .select_rows(&(0..n).collect::<Vec<_>>())
        .reshape(&[n, d_c]);
    let c2 = codes
        .select_rows(&(n..2 * n).collect::<Vec<_>>())
        .reshape(&[n, d_c]);
    let a1 = standard_normal(&[n, bundle.arch.appearance_dim], &mut rng);
    let a2 = standard_normal(&[n, bundle.arch.appearance_dim], &mut rng);
    let gen = |c: &Array<f32>, a: &Array<f32>| bundle.generate_batch(c, a, Domain::Source);
    let base = gen(&c1, &a1)?;
    let vary_a = mean_feature_distance(bundle, &base, &gen(&c1, &a2)?)?;
    let vary_c = mean_feature_distance(bundle, &base, &gen(&c2, &a1)?)?;
    Ok(vary_a / vary_c.max(f64::MIN_POSITIVE))
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
