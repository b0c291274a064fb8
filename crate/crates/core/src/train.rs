//! Training phases: source disentanglement, relation-network fitting, and the
//! few-shot target stage, plus the target-only baseline.
//!
//! Every step draws its randomness from a stream derived from
//! `(seed, phase, step)`, so a run resumed from a checkpoint replays exactly
//! the same batches and noise as an uninterrupted one.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment_target_pool, sample_distinct, sample_indices, AugmentationConfig, ImageSample,
    PairedDataset,
};
use crate::error::{Error, Result};
use crate::losses::{
    appearance_recon_loss, hinge_d_loss, hinge_g_loss, image_recon_loss, kl_loss, names,
    perceptual_loss, relation_gen_loss, relation_train_loss, ContentCodes, LossReport, Phase,
    RelationPair,
};
use crate::nets::{
    standard_normal, ArchConfig, ConvFeatureExtractor, FeatureExtractor, ModelBundle,
};
use crate::tensor::{Adam, Array, Gradients, Graph, Mode, ParamSet, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Weights {
    pub ir: f64,
    pub kl: f64,
    pub perceptual: f64,
    pub ar: f64,
    pub adversarial: f64,
}

impl Default for Stage1Weights {
    fn default() -> Self {
        Self {
            ir: 10.0,
            kl: 0.1,
            perceptual: 1.0,
            ar: 1.0,
            adversarial: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Weights {
    pub ir: f64,
    pub kl: f64,
    pub ar: f64,
    pub adversarial: f64,
    pub relation: f64,
    /// Only used when `perceptual_in_stage2` is set.
    pub perceptual: f64,
}

impl Default for Stage2Weights {
    fn default() -> Self {
        Self {
            ir: 10.0,
            kl: 0.1,
            ar: 1.0,
            adversarial: 1.0,
            relation: 1.0,
            perceptual: 1.0,
        }
    }
}

/// Stage-2 ablations. `no_adversarial` (‡) implies `no_relation` (†).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_relation: bool,
    pub no_adversarial: bool,
}

impl Ablation {
    pub const FULL: Self = Self {
        no_relation: false,
        no_adversarial: false,
    };
    pub const NO_RELATION: Self = Self {
        no_relation: true,
        no_adversarial: false,
    };
    pub const NO_RELATION_NO_ADVERSARIAL: Self = Self {
        no_relation: true,
        no_adversarial: true,
    };

    pub fn validate(&self) -> Result<()> {
        if self.no_adversarial && !self.no_relation {
            return Err(Error::Config(
                "disabling the stage-2 adversarial loss requires disabling the relation loss too"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> &'static str {
        match (self.no_relation, self.no_adversarial) {
            (false, _) => "full",
            (true, false) => "no-relation",
            (true, true) => "no-relation-no-adversarial",
        }
    }
}

/// Where the perceptual extractor comes from; recorded in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExtractorSpec {
    Random { seed: u64 },
    External { path: String },
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec::Random { seed: 0x5EED }
    }
}

impl ExtractorSpec {
    pub fn build_perceptual(&self) -> Result<Arc<dyn FeatureExtractor>> {
        Ok(match self {
            ExtractorSpec::Random { seed } => Arc::new(ConvFeatureExtractor::perceptual(*seed)),
            ExtractorSpec::External { path } => {
                Arc::new(ConvFeatureExtractor::load(path.as_ref(), None)?)
            }
        })
    }

    pub fn build_metric(&self) -> Result<Arc<dyn FeatureExtractor>> {
        Ok(match self {
            ExtractorSpec::Random { seed } => Arc::new(ConvFeatureExtractor::metric(*seed)),
            ExtractorSpec::External { path } => {
                Arc::new(ConvFeatureExtractor::load(path.as_ref(), Some(2))?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage1_steps: u64,
    pub relation_steps: u64,
    pub stage2_steps: u64,
    pub stage1_batch: usize,
    /// Upper bound; the effective stage-2 batch is `min(stage2_batch, N_tar)`.
    pub stage2_batch: usize,
    pub relation_batch: usize,
    /// Number of fixed held-in pairs used to report the relation fit.
    pub relation_probe_pairs: usize,
    pub optim: OptimConfig,
    pub stage1_weights: Stage1Weights,
    pub stage2_weights: Stage2Weights,
    pub ablation: Ablation,
    pub augmentation: AugmentationConfig,
    pub warm_start_appearance_encoder: bool,
    pub warm_start_generator: bool,
    /// Keep fitting the relation network during stage 2.
    pub relation_trainable_in_stage2: bool,
    pub perceptual_in_stage2: bool,
    pub perceptual: ExtractorSpec,
    /// Decay of the running average of the target-side weights used for
    /// sampling; 0 samples from the raw weights.
    pub average_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stage1_steps: 2000,
            relation_steps: 1000,
            stage2_steps: 2000,
            stage1_batch: 32,
            stage2_batch: 16,
            relation_batch: 32,
            relation_probe_pairs: 256,
            optim: OptimConfig::default(),
            stage1_weights: Stage1Weights::default(),
            stage2_weights: Stage2Weights::default(),
            ablation: Ablation::FULL,
            augmentation: AugmentationConfig::default(),
            warm_start_appearance_encoder: true,
            warm_start_generator: true,
            relation_trainable_in_stage2: false,
            perceptual_in_stage2: false,
            perceptual: ExtractorSpec::default(),
            average_decay: 0.995,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        self.augmentation.validate()?;
        if self.stage1_batch == 0 || self.stage2_batch == 0 || self.relation_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.stage1_batch < 2 {
            return Err(Error::Config("stage1_batch must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.average_decay) {
            return Err(Error::Config(format!(
                "average_decay must lie in [0, 1), got {}",
                self.average_decay
            )));
        }
        Ok(())
    }
}

/// Networks, optimizer state, and progress of one run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub bundle: ModelBundle,
    pub optimizers: BTreeMap<String, Adam<f32>>,
    /// Total optimization steps taken across all phases.
    pub step: u64,
    /// Steps taken within each phase.
    pub phase_steps: BTreeMap<Phase, u64>,
    pub completed: BTreeSet<Phase>,
    pub history: Vec<LossReport>,
    pub seed: u64,
    pub perceptual: ExtractorSpec,
    /// Running averages of target-side networks, by scope.
    pub averages: BTreeMap<String, ParamSet<f32>>,
    codes: Option<ContentCodes>,
    augmented: Option<Arc<Vec<ImageSample>>>,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn phase_tag(p: Phase) -> u64 {
    match p {
        Phase::Stage1 => 1,
        Phase::Relation => 2,
        Phase::Stage2 => 3,
        Phase::Baseline => 4,
    }
}

/// Deterministic per-step random stream.
pub fn step_rng(seed: u64, phase: Phase, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed ^ phase_tag(phase)) ^ step))
}

fn gather(pool: &[ImageSample], idx: &[usize]) -> Result<Array<f32>> {
    let refs: Vec<&ImageSample> = idx.iter().map(|&i| &pool[i]).collect();
    crate::data::stack(&refs)
}

/// Weighted sum of `(weight, term)` pairs, skipping zero weights.
fn weighted<'g>(terms: &[(f64, Var<'g, f32>)]) -> Option<Var<'g, f32>> {
    terms
        .iter()
        .filter(|(w, _)| *w != 0.0)
        .map(|&(w, v)| v.scale(w))
        .reduce(|a, b| a.add(b))
}

impl TrainState {
    pub fn new(arch: &ArchConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let bundle = ModelBundle::new(arch, cfg.seed, cfg.perceptual.build_perceptual()?)?;
        Ok(Self::from_parts(bundle, cfg.seed, cfg.perceptual.clone()))
    }

    pub fn from_parts(bundle: ModelBundle, seed: u64, perceptual: ExtractorSpec) -> Self {
        Self {
            bundle,
            optimizers: BTreeMap::new(),
            step: 0,
            phase_steps: BTreeMap::new(),
            completed: BTreeSet::new(),
            history: Vec::new(),
            seed,
            perceptual,
            averages: BTreeMap::new(),
            codes: None,
            augmented: None,
        }
    }

    pub fn phase_step(&self, phase: Phase) -> u64 {
        self.phase_steps.get(&phase).copied().unwrap_or(0)
    }

    fn optimizer(&mut self, scope: &str, cfg: &OptimConfig) -> &mut Adam<f32> {
        self.optimizers
            .entry(scope.to_string())
            .or_insert_with(|| Adam::new(cfg.lr, cfg.beta1, cfg.beta2))
    }

    fn apply(&mut self, scopes: &[&str], grads: &Gradients<f32>, cfg: &OptimConfig) {
        for &scope in scopes {
            let mut opt = self.optimizer(scope, cfg).clone();
            let params = self.bundle.params_mut(scope).expect("known scope");
            opt.update(params, grads);
            self.optimizers.insert(scope.to_string(), opt);
        }
    }

    /// Folds the current weights of `scopes` into their running averages.
    fn update_averages(&mut self, scopes: &[&str], decay: f64) {
        for &scope in scopes {
            let current = self.bundle.params(scope).expect("known scope");
            match self.averages.get_mut(scope) {
                Some(avg) if decay > 0.0 => avg.blend(current, decay as f32),
                _ => {
                    self.averages.insert(scope.to_string(), current.clone());
                }
            }
        }
    }

    /// The bundle with averaged weights swapped in, for sampling.
    pub fn sampling_bundle(&self) -> ModelBundle {
        let mut bundle = self.bundle.clone();
        for (scope, avg) in &self.averages {
            *bundle.params_mut(scope).expect("known scope") = avg.clone();
        }
        bundle
    }

    fn assert_frozen(&self, scopes: &[&str], grads: &Gradients<f32>) {
        for &scope in scopes {
            let params = self.bundle.params(scope).expect("known scope");
            assert!(
                !params.has_gradient(grads),
                "frozen network {scope} received a gradient"
            );
        }
    }

    fn begin(&mut self, phase: Phase) -> (u64, ChaCha8Rng) {
        let k = self.phase_step(phase) + 1;
        (k, step_rng(self.seed, phase, k))
    }

    fn finish(&mut self, phase: Phase, report: LossReport) -> LossReport {
        self.phase_steps.insert(phase, report.step);
        self.step += 1;
        self.history.push(report.clone());
        report
    }

    fn require(&self, phase: Phase, needed: Phase) -> Result<()> {
        if !self.completed.contains(&needed) {
            return Err(Error::PhaseOrder(format!(
                "{phase} requires a completed {needed} phase"
            )));
        }
        Ok(())
    }

    /// Posterior-mean content codes of the source pool (cached).
    pub fn content_codes(&mut self, d: &PairedDataset) -> Result<&ContentCodes> {
        let stale = self.codes.as_ref().is_none_or(|c| c.len() != d.n_source());
        if stale {
            self.codes = Some(ContentCodes::compute(&self.bundle, d, 128)?);
        }
        Ok(self.codes.as_ref().expect("just computed"))
    }

    /// Augmented target pool for stage 2 (cached per state).
    pub fn augmented_pool(
        &mut self,
        d: &PairedDataset,
        cfg: &AugmentationConfig,
    ) -> Result<Arc<Vec<ImageSample>>> {
        if self.augmented.is_none() {
            let seed = mix(self.seed ^ 0xA06);
            self.augmented = Some(Arc::new(augment_target_pool(d, cfg, seed)?));
        }
        Ok(self.augmented.clone().expect("just computed"))
    }

    pub fn mark_completed(&mut self, phase: Phase) {
        self.completed.insert(phase);
        if phase == Phase::Stage1 {
            self.codes = None;
        }
    }
}

/// One stage-1 iteration: a source discriminator update followed by an
/// encoder/generator update.
pub fn train_stage1_step(
    state: &mut TrainState,
    d: &PairedDataset,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let (k, mut rng) = state.begin(Phase::Stage1);
    state.codes = None;
    let w = &cfg.stage1_weights;
    let arch = state.bundle.arch.clone();
    let b = cfg.stage1_batch.min(d.n_source());
    let idx = sample_indices(&mut rng, d.n_source(), b);
    let x_real = gather(d.source_pool(), &idx)?;
    let eps_c = standard_normal(&[b, arch.content_dim], &mut rng);
    let eps_a = standard_normal(&[b, arch.appearance_dim], &mut rng);
    let z_prior = standard_normal(&[b, arch.appearance_dim], &mut rng);

    let mut report = LossReport::new(Phase::Stage1, k);
    let g = Graph::new();
    let m = &state.bundle;
    let x = g.constant(x_real.clone());
    let q_c = m.enc_content.forward(&g, x, Mode::Trainable);
    let q_a = m.enc_app_src.forward(&g, x, Mode::Trainable);
    let z_c = q_c.sample(eps_c);
    let z_a = q_a.sample(eps_a);
    let x_rec = m.gen_src.forward(&g, z_c, z_a, Mode::Trainable);
    let z_a_prior = g.constant(z_prior);
    let x_fake = m.gen_src.forward(&g, z_c, z_a_prior, Mode::Trainable);

    // Discriminator update on the current fakes.
    let d_loss = {
        let gd = Graph::new();
        let real = m
            .disc_src
            .forward(&gd, gd.constant(x_real), Mode::Trainable);
        let fake = m
            .disc_src
            .forward(&gd, gd.constant_arc(x_fake.value()), Mode::Trainable);
        let loss = hinge_d_loss(real, fake)?;
        let value = loss.item() as f64;
        report.record(names::IA_D_SRC, value)?;
        gd.backward(loss)
    };
    state.assert_frozen(&["enc_content", "enc_app_src", "gen_src"], &d_loss);
    state.apply(&["disc_src"], &d_loss, &cfg.optim);

    let m = &state.bundle;
    let ir = image_recon_loss(x_rec, x)?;
    let kl = kl_loss(&q_c)?.add(kl_loss(&q_a)?);
    let perceptual = perceptual_loss(x_rec, x_fake, |v| m.perceptual.forward(&g, v))?;
    let z_a_rec = m.enc_app_src.forward(&g, x_fake, Mode::Trainable).mean;
    let ar = appearance_recon_loss(z_a_rec, z_a_prior)?;
    let adv = hinge_g_loss(m.disc_src.forward(&g, x_fake, Mode::Frozen))?;
    report.record(names::IR_SRC, ir.item() as f64)?;
    report.record(names::KL_SRC, kl.item() as f64)?;
    report.record(names::PERCEPTUAL, perceptual.item() as f64)?;
    report.record(names::AR_SRC, ar.item() as f64)?;
    report.record(names::IA_G_SRC, adv.item() as f64)?;
    let total = weighted(&[
        (w.ir, ir),
        (w.kl, kl),
        (w.perceptual, perceptual),
        (w.ar, ar),
        (w.adversarial, adv),
    ])
    .ok_or_else(|| Error::Config("all stage-1 weights are zero".into()))?;
    let grads = g.backward(total);
    state.assert_frozen(&["disc_src"], &grads);
    state.apply(
        &["enc_content", "enc_app_src", "gen_src"],
        &grads,
        &cfg.optim,
    );
    Ok(state.finish(Phase::Stage1, report))
}

/// Runs `steps` stage-1 iterations and marks the phase complete.
pub fn train_stage1(
    state: &mut TrainState,
    d: &PairedDataset,
    cfg: &TrainConfig,
    steps: u64,
    mut on_step: impl FnMut(&LossReport),
) -> Result<()> {
    for _ in 0..steps {
        let r = train_stage1_step(state, d, cfg)?;
        on_step(&r);
    }
    check_finite(state)?;
    state.mark_completed(Phase::Stage1);
    Ok(())
}

fn check_finite(state: &TrainState) -> Result<()> {
    if !state.bundle.all_finite() {
        return Err(Error::Numeric(format!(
            "non-finite parameters after step {}",
            state.step
        )));
    }
    Ok(())
}

/// Draws `n` admissible relation pairs (`j ≠ κ(i)`).
pub fn sample_relation_pairs<R: Rng + ?Sized>(
    rng: &mut R,
    d: &PairedDataset,
    n: usize,
) -> Result<Vec<RelationPair>> {
    if d.n_target() < 2 || d.n_source() < 2 {
        return Err(Error::Config(
            "relation training needs at least two target and two source samples".into(),
        ));
    }
    let mut pairs = Vec::with_capacity(n);
    while pairs.len() < n {
        let target = rng.random_range(0..d.n_target());
        let source = rng.random_range(0..d.n_source());
        if source != d.kappa(target)? {
            pairs.push(RelationPair { source, target });
        }
    }
    Ok(pairs)
}

fn relation_batch(d: &PairedDataset, pairs: &[RelationPair]) -> Result<(Array<f32>, Array<f32>)> {
    let src: Vec<usize> = pairs.iter().map(|p| p.source).collect();
    let tar: Vec<usize> = pairs.iter().map(|p| p.target).collect();
    Ok((
        gather(d.source_pool(), &src)?,
        gather(d.target_pool(), &tar)?,
    ))
}

/// One relation-network update on fresh admissible pairs.
pub fn train_relation_step(
    state: &mut TrainState,
    d: &PairedDataset,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    state.require(Phase::Relation, Phase::Stage1)?;
    let (k, mut rng) = state.begin(Phase::Relation);
    let pairs = sample_relation_pairs(&mut rng, d, cfg.relation_batch)?;
    let (xs, xt) = relation_batch(d, &pairs)?;
    state.content_codes(d)?;
    let codes = state.codes.as_ref().expect("cached");
    let g = Graph::new();
    let scores = state
        .bundle
        .relation
        .forward(&g, g.constant(xs), g.constant(xt), Mode::Trainable);
    let loss = relation_train_loss(scores, &pairs, d, codes)?;
    let mut report = LossReport::new(Phase::Relation, k);
    report.record(names::RT_TAR, loss.item() as f64)?;
    let grads = g.backward(loss);
    state.assert_frozen(&["enc_content", "gen_src", "enc_app_src"], &grads);
    state.apply(&["relation"], &grads, &cfg.optim);
    Ok(state.finish(Phase::Relation, report))
}

/// Fit of the relation network on a fixed held-in probe set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelationFit {
    /// Mean `|R − D_c|` over the probe pairs.
    pub mean_abs_error: f64,
    /// Mean `D_c` over the probe pairs.
    pub mean_distance: f64,
}

impl RelationFit {
    pub fn relative_error(&self) -> f64 {
        self.mean_abs_error / self.mean_distance.max(f64::MIN_POSITIVE)
    }
}

/// Probe pairs are a deterministic draw from the same admissible set the
/// network trains on.
pub fn relation_probe(
    state: &mut TrainState,
    d: &PairedDataset,
    cfg: &TrainConfig,
) -> Result<RelationFit> {
    let mut rng = step_rng(state.seed, Phase::Relation, u64::MAX);
    let pairs = sample_relation_pairs(&mut rng, d, cfg.relation_probe_pairs.max(1))?;
    state.content_codes(d)?;
    let codes = state.codes.as_ref().expect("cached");
    let (mut err, mut dist) = (0.0, 0.0);
    for chunk in pairs.chunks(64) {
        let (xs, xt) = relation_batch(d, chunk)?;
        let g = Graph::new();
        let scores = state
            .bundle
            .relation
            .forward(&g, g.constant(xs), g.constant(xt), Mode::Frozen)
            .value();
        for (p, &s) in chunk.iter().zip(scores.data()) {
            let t = codes.pair_distance(p.source, p.target, d)? as f64;
            err += (s as f64 - t).abs();
            dist += t;
        }
    }
    let n = pairs.len() as f64;
    Ok(RelationFit {
        mean_abs_error: err / n,
        mean_distance: dist / n,
    })
}

/// Trains the relation network for `steps` updates with every other network
/// frozen, then reports its probe-set fit.
pub fn train_relation(
    state: &mut TrainState,
    d: &PairedDataset,
    cfg: &TrainConfig,
    steps: u64,
    mut on_step: impl FnMut(&LossReport),
) -> Result<RelationFit> {
    for _ in 0..steps {
        let r = train_relation_step(state, d, cfg)?;
        on_step(&r);
    }
    check_finite(state)?;
    state.mark_completed(Phase::Relation);
    relation_probe(state, d, cfg)
}

/// Copies the source-side warm starts into the target networks; called once
/// before the first stage-2 step.
pub fn prepare_stage2(state: &mut TrainState, cfg: &TrainConfig) {
    if state.phase_step(Phase::Stage2) == 0 {
        state
            .bundle
            .warm_start_target(cfg.warm_start_appearance_encoder, cfg.warm_start_generator);
    }
}

/// A derangement of `0..n` (no fixed points) for `n ≥ 2`.
fn derangement<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    let shift = rng.random_range(1..n);
    (0..n).map(|i| (i + shift) % n).collect()
}

/// One stage-2 iteration: a target discriminator update (unless the
/// adversarial term is ablated) followed by a target encoder/generator update.
pub fn train_stage2_step(
    state: &mut TrainState,
    d: &PairedDataset,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    state.require(Phase::Stage2, Phase::Stage1)?;
    let use_relation = !cfg.ablation.no_relation;
    if use_relation {
        state.require(Phase::Stage2, Phase::Relation)?;
    }
    cfg.ablation.validate()?;
    prepare_stage2(state, cfg);
    let (k, mut rng) = state.begin(Phase::Stage2);
    let w = &cfg.stage2_weights;
    let arch = state.bundle.arch.clone();
    let aug = state.augmented_pool(d, &cfg.augmentation)?;
    state.content_codes(d)?;
    let codes = state.codes.clone().expect("cached");

    let b = cfg.stage2_batch.min(d.n_target()).max(1);
    let tar_idx = sample_distinct(&mut rng, d.n_target(), b);
    let pair_idx: Vec<usize> = tar_idx.iter().map(|&i| d.kappa(i)).collect::<Result<_>>()?;
    let aug_idx = sample_indices(&mut rng, aug.len(), b);
    let src_idx = sample_distinct(&mut rng, d.n_source(), b);
    let perm = if b >= 2 {
        derangement(&mut rng, b)
    } else {
        vec![0]
    };
    let eps_pair_c = standard_normal(&[b, arch.content_dim], &mut rng);
    let eps_tar_a = standard_normal(&[b, arch.appearance_dim], &mut rng);
    let eps_aug_a = standard_normal(&[b, arch.appearance_dim], &mut rng);
    let eps_syn_a = standard_normal(&[b, arch.appearance_dim], &mut rng);
    let z_src_prior = standard_normal(&[b, arch.appearance_dim], &mut rng);

    let x_tar = gather(d.target_pool(), &tar_idx)?;
    let x_pair = gather(d.source_pool(), &pair_idx)?;
    let x_aug = gather(&aug, &aug_idx)?;
    let content_of = |idx: &[usize]| -> Array<f32> {
        let dim = codes.dim();
        let mut v = Vec::with_capacity(idx.len() * dim);
        for &j in idx {
            v.extend_from_slice(codes.code(j));
        }
        Array::from_vec(&[idx.len(), dim], v)
    };
    let z_syn_c = content_of(&src_idx);
    let perm_src: Vec<usize> = perm.iter().map(|&p| src_idx[p]).collect();
    let z_rel_c = content_of(&perm_src);

    let mut report = LossReport::new(Phase::Stage2, k);
    let g = Graph::new();
    let m = &state.bundle;
    let xt = g.constant(x_tar.clone());
    // Paired reconstruction through the frozen content encoder.
    let q_pair_c = m.enc_content.forward(&g, g.constant(x_pair), Mode::Frozen);
    let z_pair_c = q_pair_c.sample(eps_pair_c);
    let q_tar_a = m.enc_app_tar.forward(&g, xt, Mode::Trainable);
    let z_tar_a = q_tar_a.sample(eps_tar_a);
    let x_rec = m.gen_tar.forward(&g, z_pair_c, z_tar_a, Mode::Trainable);
    let ir = image_recon_loss(x_rec, xt)?;

    // Appearance prior on the augmented pool.
    let q_aug_a = m
        .enc_app_tar
        .forward(&g, g.constant(x_aug), Mode::Trainable);
    let kl = kl_loss(&q_aug_a)?;
    let z_aug_a = q_aug_a.sample(eps_aug_a).detach();
    let x_ar = m.gen_tar.forward(&g, z_pair_c, z_aug_a, Mode::Trainable);
    let z_ar_rec = m.enc_app_tar.forward(&g, x_ar, Mode::Trainable).mean;
    let ar = appearance_recon_loss(z_ar_rec, z_aug_a)?;

    // Synthetic targets: source content, target appearance.
    let syn_a = q_tar_a.sample(eps_syn_a);
    let x_syn = m
        .gen_tar
        .forward(&g, g.constant(z_syn_c.clone()), syn_a, Mode::Trainable);

    report.record(names::IR_TAR, ir.item() as f64)?;
    report.record(names::KL_TAR, kl.item() as f64)?;
    report.record(names::AR_TAR, ar.item() as f64)?;
    let mut terms = vec![(w.ir, ir), (w.kl, kl), (w.ar, ar)];

    if !cfg.ablation.no_adversarial {
        let d_grads = {
            let gd = Graph::new();
            let real = m.disc_tar.forward(&gd, gd.constant(x_tar), Mode::Trainable);
            let fake = m
                .disc_tar
                .forward(&gd, gd.constant_arc(x_syn.value()), Mode::Trainable);
            let loss = hinge_d_loss(real, fake)?;
            report.record(names::IA_D_TAR, loss.item() as f64)?;
            gd.backward(loss)
        };
        state.assert_frozen(
            &[
                "enc_content",
                "gen_src",
                "relation",
                "enc_app_tar",
                "gen_tar",
            ],
            &d_grads,
        );
        state.apply(&["disc_tar"], &d_grads, &cfg.optim);
        let m = &state.bundle;
        let adv = hinge_g_loss(m.disc_tar.forward(&g, x_syn, Mode::Frozen))?;
        report.record(names::IA_G_TAR, adv.item() as f64)?;
        terms.push((w.adversarial, adv));
    }

    let m = &state.bundle;
    // A single-target batch has no distinct content pair to relate.
    if use_relation && b >= 2 {
        let x_src_gen = m.gen_src.forward(
            &g,
            g.constant(z_rel_c.clone()),
            g.constant(z_src_prior),
            Mode::Frozen,
        );
        let scores = m.relation.forward(&g, x_src_gen, x_syn, Mode::Frozen);
        let pairs: Vec<(usize, usize)> = perm_src
            .iter()
            .zip(&src_idx)
            .map(|(&i, &j)| (i, j))
            .collect();
        let rg = relation_gen_loss(scores, &z_rel_c, &z_syn_c, &pairs)?;
        report.record(names::RG_TAR, rg.item() as f64)?;
        terms.push((w.relation, rg));
    }
    if cfg.perceptual_in_stage2 {
        let p = perceptual_loss(x_rec, x_ar, |v| m.perceptual.forward(&g, v))?;
        report.record(names::P_TAR, p.item() as f64)?;
        terms.push((w.perceptual, p));
    }

    let total =
        weighted(&terms).ok_or_else(|| Error::Config("all stage-2 weights are zero".into()))?;
    let grads = g.backward(total);
    state.assert_frozen(
        &[
            "enc_content",
            "gen_src",
            "relation",
            "disc_tar",
            "enc_app_src",
        ],
        &grads,
    );
    state.apply(&["enc_app_tar", "gen_tar"], &grads, &cfg.optim);
    state.update_averages(&["enc_app_tar", "gen_tar"], cfg.average_decay);

    if cfg.relation_trainable_in_stage2 && use_relation {
        let pairs = sample_relation_pairs(&mut rng, d, cfg.relation_batch)?;
        let (xs, xt) = relation_batch(d, &pairs)?;
        let gr = Graph::new();
        let scores =
            state
                .bundle
                .relation
                .forward(&gr, gr.constant(xs), gr.constant(xt), Mode::Trainable);
        let loss = relation_train_loss(scores, &pairs, d, &codes)?;
        report.record(names::RT_TAR, loss.item() as f64)?;
        let grads = gr.backward(loss);
        state.apply(&["relation"], &grads, &cfg.optim);
    }
    Ok(state.finish(Phase::Stage2, report))
}

pub fn train_stage2(
    state: &mut TrainState,
    d: &PairedDataset,
    cfg: &TrainConfig,
    steps: u64,
    mut on_step: impl FnMut(&LossReport),
) -> Result<()> {
    for _ in 0..steps {
        let r = train_stage2_step(state, d, cfg)?;
        on_step(&r);
    }
    check_finite(state)?;
    state.mark_completed(Phase::Stage2);
    Ok(())
}

/// One step of the target-only GAN: both codes drawn from `N(0, I)`.
pub fn train_baseline_step(
    state: &mut TrainState,
    targets: &[ImageSample],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    if targets.is_empty() {
        return Err(Error::Config(
            "baseline needs at least one target sample".into(),
        ));
    }
    let (k, mut rng) = state.begin(Phase::Baseline);
    let arch = state.bundle.arch.clone();
    let b = cfg.stage2_batch.min(targets.len()).max(1);
    let idx = sample_distinct(&mut rng, targets.len(), b);
    let x_real = gather(targets, &idx)?;
    let zc = standard_normal(&[b, arch.content_dim], &mut rng);
    let za = standard_normal(&[b, arch.appearance_dim], &mut rng);
    let mut report = LossReport::new(Phase::Baseline, k);
    let g = Graph::new();
    let m = &state.bundle;
    let fake = m
        .gen_tar
        .forward(&g, g.constant(zc), g.constant(za), Mode::Trainable);
    let d_grads = {
        let gd = Graph::new();
        let real = m
            .disc_tar
            .forward(&gd, gd.constant(x_real), Mode::Trainable);
        let f = m
            .disc_tar
            .forward(&gd, gd.constant_arc(fake.value()), Mode::Trainable);
        let loss = hinge_d_loss(real, f)?;
        report.record(names::IA_D_TAR, loss.item() as f64)?;
        gd.backward(loss)
    };
    state.apply(&["disc_tar"], &d_grads, &cfg.optim);
    let adv = hinge_g_loss(state.bundle.disc_tar.forward(&g, fake, Mode::Frozen))?;
    report.record(names::IA_G_TAR, adv.item() as f64)?;
    let grads = g.backward(adv);
    state.assert_frozen(&["disc_tar"], &grads);
    state.apply(&["gen_tar"], &grads, &cfg.optim);
    state.update_averages(&["gen_tar"], cfg.average_decay);
    Ok(state.finish(Phase::Baseline, report))
}

/// Trains a hinge GAN from scratch on the target pool only, with the same
/// target generator/discriminator architectures.
pub fn train_baseline_s(
    targets: &[ImageSample],
    arch: &ArchConfig,
    cfg: &TrainConfig,
    steps: u64,
    mut on_step: impl FnMut(&LossReport),
) -> Result<TrainState> {
    let mut state = TrainState::new(arch, cfg)?;
    for _ in 0..steps {
        let r = train_baseline_step(&mut state, targets, cfg)?;
        on_step(&r);
    }
    check_finite(&state)?;
    state.mark_completed(Phase::Baseline);
    Ok(state)
}
