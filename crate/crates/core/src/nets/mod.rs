//! Learnable components: content and appearance encoders, generators,
//! discriminators, the relation network, plus the frozen feature extractors.

mod extractor;
mod layers;

pub(crate) use extractor::{f32_bytes, read_f32};
pub use extractor::{ConvFeatureExtractor, FeatureExtractor};

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{stack, Domain, ImageSample};
use crate::error::{contract, Result};
use crate::tensor::{Array, Float, Graph, Mode, ParamSet, Var};
use layers::{Backbone, Conv, Linear, LEAK};

/// Network sizes shared by every component of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub image_size: usize,
    pub base_width: usize,
    /// Number of stride-2 down (and matching up) sampling stages.
    pub stages: usize,
    pub content_dim: usize,
    pub appearance_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_width: 64,
            stages: 4,
            content_dim: 128,
            appearance_dim: 8,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.image_size % (1 << self.stages) != 0 {
            return Err(crate::Error::Config(format!(
                "image_size {} must be divisible by 2^stages (stages = {})",
                self.image_size, self.stages
            )));
        }
        if self.base_width == 0 || self.content_dim == 0 || self.appearance_dim == 0 {
            return Err(crate::Error::Config(
                "widths and latent dims must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Channel width after each downsampling stage (doubling, capped at 4×).
    pub fn widths(&self) -> Vec<usize> {
        (0..self.stages)
            .map(|s| self.base_width << s.min(2))
            .collect()
    }

    pub fn bottom(&self) -> usize {
        self.image_size >> self.stages
    }

    pub fn latent_dim(&self) -> usize {
        self.content_dim + self.appearance_dim
    }
}

/// Diagonal Gaussian over a batch of codes: `mean` and `logvar` are `[N, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Array<f32>,
    pub logvar: Array<f32>,
}

impl GaussianPosterior {
    pub fn new(mean: Array<f32>, logvar: Array<f32>) -> Result<Self> {
        if mean.shape() != logvar.shape() || mean.shape().len() != 2 {
            return Err(contract(format!(
                "posterior mean {:?} and logvar {:?} must both be [N, d]",
                mean.shape(),
                logvar.shape()
            )));
        }
        if !logvar.all_finite() || !mean.all_finite() {
            return Err(contract("posterior contains non-finite values"));
        }
        Ok(Self { mean, logvar })
    }

    pub fn dim(&self) -> usize {
        self.mean.last_dim()
    }

    pub fn len(&self) -> usize {
        self.mean.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reparameterized draw `mean + exp(logvar / 2) ⊙ ε`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Array<f32> {
        let eps = standard_normal(self.mean.shape(), rng);
        let mut z = self.mean.clone();
        for ((zv, &lv), &e) in z
            .data_mut()
            .iter_mut()
            .zip(self.logvar.data())
            .zip(eps.data())
        {
            *zv += (lv * 0.5).exp() * e;
        }
        z
    }
}

/// Posterior still attached to a graph.
#[derive(Clone, Copy)]
pub struct PosteriorVars<'g, T: Float = f32> {
    pub mean: Var<'g, T>,
    pub logvar: Var<'g, T>,
}

impl<'g, T: Float> PosteriorVars<'g, T> {
    /// Reparameterized sample with externally drawn `eps ~ N(0, I)`.
    pub fn sample(&self, eps: Array<T>) -> Var<'g, T> {
        let g = self.mean.graph();
        let std = self.logvar.scale(0.5).exp();
        self.mean.add(std.mul(g.constant(eps)))
    }

    pub fn detach(&self) -> GaussianPosterior
    where
        T: Float,
    {
        GaussianPosterior {
            mean: self.mean.value().cast(),
            logvar: self.logvar.value().cast(),
        }
    }
}

/// One content code and one appearance code.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPair {
    pub content: Vec<f32>,
    pub appearance: Vec<f32>,
}

/// Standard-normal array from a seeded stream.
pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Array<f32> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    Array::from_vec(shape, data)
}

/// Conv encoder emitting a diagonal Gaussian posterior.
#[derive(Debug, Clone)]
pub struct Encoder {
    backbone: Backbone,
    head: Linear,
    pub out_dim: usize,
    pub params: ParamSet<f32>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        scope: &str,
        arch: &ArchConfig,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let backbone = Backbone::new(3, &arch.widths(), arch.image_size);
        let head = Linear::new("head", backbone.out_features, 2 * out_dim);
        let mut params = ParamSet::new(scope);
        backbone.init(&mut params, rng);
        head.init(&mut params, rng, 0.1);
        Self {
            backbone,
            head,
            out_dim,
            params,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<f32>, x: Var<'g, f32>, mode: Mode) -> PosteriorVars<'g> {
        let h = self.backbone.forward(g, &self.params, x, mode);
        let out = self.head.forward(g, &self.params, h, mode);
        PosteriorVars {
            mean: out.slice_last(0, self.out_dim),
            logvar: out.slice_last(self.out_dim, self.out_dim),
        }
    }

    /// Sets the output layer to zero: every input then maps to `N(0, I)`.
    pub fn zero_head(&mut self) {
        self.head.zero(&mut self.params);
    }

    pub fn encode(&self, batch: &Array<f32>) -> GaussianPosterior {
        let g = Graph::new();
        self.forward(&g, g.constant(batch.clone()), Mode::Frozen)
            .detach()
    }
}

/// Decoder from a concatenated `[z^C, z^A]` code to a `tanh`-bounded image.
#[derive(Debug, Clone)]
pub struct Generator {
    arch: ArchConfig,
    stem: Linear,
    ups: Vec<Conv>,
    out: Conv,
    pub params: ParamSet<f32>,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(scope: &str, arch: &ArchConfig, rng: &mut R) -> Self {
        let widths = arch.widths();
        let top = *widths.last().expect("at least one stage");
        let b = arch.bottom();
        let stem = Linear::new("stem", arch.latent_dim(), b * b * top);
        let mut cin = top;
        let ups: Vec<Conv> = (0..arch.stages)
            .rev()
            .enumerate()
            .map(|(i, s)| {
                let c = Conv::new(format!("up{i}"), cin, widths[s], 1);
                cin = widths[s];
                c
            })
            .collect();
        let out = Conv::new("out", cin, 3, 1);
        let mut params = ParamSet::new(scope);
        stem.init(&mut params, rng, 2f64.sqrt());
        for c in &ups {
            c.init(&mut params, rng);
        }
        out.init(&mut params, rng);
        Self {
            arch: arch.clone(),
            stem,
            ups,
            out,
            params,
        }
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph<f32>,
        content: Var<'g, f32>,
        appearance: Var<'g, f32>,
        mode: Mode,
    ) -> Var<'g, f32> {
        let z = Var::concat(&[content, appearance]);
        let n = z.shape()[0];
        let b = self.arch.bottom();
        let top = *self.arch.widths().last().unwrap();
        let h = self
            .stem
            .forward(g, &self.params, z, mode)
            .leaky_relu(LEAK)
            .reshape(&[n, b, b, top]);
        let h = self.ups.iter().fold(h, |h, c| {
            c.forward(g, &self.params, h.upsample2x(), mode)
                .leaky_relu(LEAK)
        });
        self.out.forward(g, &self.params, h, mode).tanh()
    }

    pub fn generate_batch(&self, content: &Array<f32>, appearance: &Array<f32>) -> Array<f32> {
        let g = Graph::new();
        let y = self.forward(
            &g,
            g.constant(content.clone()),
            g.constant(appearance.clone()),
            Mode::Frozen,
        );
        (*y.value()).clone()
    }
}

/// Conv critic with an unbounded scalar output per image.
#[derive(Debug, Clone)]
pub struct Discriminator {
    backbone: Backbone,
    head: Linear,
    pub params: ParamSet<f32>,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(
        scope: &str,
        arch: &ArchConfig,
        in_channels: usize,
        rng: &mut R,
    ) -> Self {
        let backbone = Backbone::new(in_channels, &arch.widths(), arch.image_size);
        let head = Linear::new("head", backbone.out_features, 1);
        let mut params = ParamSet::new(scope);
        backbone.init(&mut params, rng);
        head.init(&mut params, rng, 1.0);
        Self {
            backbone,
            head,
            params,
        }
    }

    /// Raw scores `[N]`.
    pub fn forward<'g>(&self, g: &'g Graph<f32>, x: Var<'g, f32>, mode: Mode) -> Var<'g, f32> {
        let h = self.backbone.forward(g, &self.params, x, mode);
        self.head.forward(g, &self.params, h, mode).sum_last()
    }

    pub fn zero_head(&mut self) {
        self.head.zero(&mut self.params);
    }
}

/// Regressor from a channel-concatenated (source, target) image pair to a
/// nonnegative content distance.
#[derive(Debug, Clone)]
pub struct RelationNet {
    critic: Discriminator,
}

impl RelationNet {
    pub fn new<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Self {
        Self {
            critic: Discriminator::new("relation", arch, 6, rng),
        }
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.critic.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.critic.params
    }

    /// Scores `[N]`, each ≥ 0.
    pub fn forward<'g>(
        &self,
        g: &'g Graph<f32>,
        x_src: Var<'g, f32>,
        x_tar: Var<'g, f32>,
        mode: Mode,
    ) -> Var<'g, f32> {
        let pair = Var::concat(&[x_src, x_tar]);
        self.critic.forward(g, pair, mode).softplus()
    }
}

/// Predicted content distance of an image pair.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct RelationScore(pub f32);

/// Every network of a run plus the frozen perceptual extractor.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub arch: ArchConfig,
    pub enc_content: Encoder,
    pub enc_app_src: Encoder,
    pub enc_app_tar: Encoder,
    pub gen_src: Generator,
    pub gen_tar: Generator,
    pub disc_src: Discriminator,
    pub disc_tar: Discriminator,
    pub relation: RelationNet,
    pub perceptual: Arc<dyn FeatureExtractor>,
}

/// Scopes of every learnable network, in checkpoint order.
pub const NETWORK_SCOPES: [&str; 8] = [
    "enc_content",
    "enc_app_src",
    "enc_app_tar",
    "gen_src",
    "gen_tar",
    "disc_src",
    "disc_tar",
    "relation",
];

impl ModelBundle {
    pub fn new(
        arch: &ArchConfig,
        seed: u64,
        perceptual: Arc<dyn FeatureExtractor>,
    ) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            arch: arch.clone(),
            enc_content: Encoder::new("enc_content", arch, arch.content_dim, &mut rng),
            enc_app_src: Encoder::new("enc_app_src", arch, arch.appearance_dim, &mut rng),
            enc_app_tar: Encoder::new("enc_app_tar", arch, arch.appearance_dim, &mut rng),
            gen_src: Generator::new("gen_src", arch, &mut rng),
            gen_tar: Generator::new("gen_tar", arch, &mut rng),
            disc_src: Discriminator::new("disc_src", arch, 3, &mut rng),
            disc_tar: Discriminator::new("disc_tar", arch, 3, &mut rng),
            relation: RelationNet::new(arch, &mut rng),
            perceptual,
        })
    }

    pub fn params(&self, scope: &str) -> Option<&ParamSet<f32>> {
        Some(match scope {
            "enc_content" => &self.enc_content.params,
            "enc_app_src" => &self.enc_app_src.params,
            "enc_app_tar" => &self.enc_app_tar.params,
            "gen_src" => &self.gen_src.params,
            "gen_tar" => &self.gen_tar.params,
            "disc_src" => &self.disc_src.params,
            "disc_tar" => &self.disc_tar.params,
            "relation" => self.relation.params(),
            _ => return None,
        })
    }

    pub fn params_mut(&mut self, scope: &str) -> Option<&mut ParamSet<f32>> {
        Some(match scope {
            "enc_content" => &mut self.enc_content.params,
            "enc_app_src" => &mut self.enc_app_src.params,
            "enc_app_tar" => &mut self.enc_app_tar.params,
            "gen_src" => &mut self.gen_src.params,
            "gen_tar" => &mut self.gen_tar.params,
            "disc_src" => &mut self.disc_src.params,
            "disc_tar" => &mut self.disc_tar.params,
            "relation" => self.relation.params_mut(),
            _ => return None,
        })
    }

    pub fn all_finite(&self) -> bool {
        NETWORK_SCOPES
            .iter()
            .all(|s| self.params(s).is_some_and(|p| p.all_finite()))
    }

    /// Copies trained source-side parameters into the target-side networks.
    pub fn warm_start_target(&mut self, appearance_encoder: bool, generator: bool) {
        if appearance_encoder {
            self.enc_app_tar.params = self.enc_app_src.params.rescoped("enc_app_tar");
        }
        if generator {
            self.gen_tar.params = self.gen_src.params.rescoped("gen_tar");
        }
    }

    fn check_images(&self, images: &[&ImageSample]) -> Result<Array<f32>> {
        let s = self.arch.image_size;
        if let Some(bad) = images.iter().find(|x| x.height() != s || x.width() != s) {
            return Err(contract(format!(
                "image is {}x{}, model expects {s}x{s}",
                bad.height(),
                bad.width()
            )));
        }
        stack(images)
    }

    fn check_codes(&self, codes: &Array<f32>, dim: usize, what: &str) -> Result<()> {
        if codes.shape().len() != 2 || codes.last_dim() != dim {
            return Err(contract(format!(
                "{what} codes must be [N, {dim}], got {:?}",
                codes.shape()
            )));
        }
        Ok(())
    }

    pub fn appearance_encoder(&self, domain: Domain) -> &Encoder {
        match domain {
            Domain::Source => &self.enc_app_src,
            Domain::Target => &self.enc_app_tar,
        }
    }

    pub fn generator(&self, domain: Domain) -> &Generator {
        match domain {
            Domain::Source => &self.gen_src,
            Domain::Target => &self.gen_tar,
        }
    }

    pub fn discriminator(&self, domain: Domain) -> &Discriminator {
        match domain {
            Domain::Source => &self.disc_src,
            Domain::Target => &self.disc_tar,
        }
    }

    pub fn encode_content(&self, x: &ImageSample) -> Result<GaussianPosterior> {
        self.encode_content_batch(&[x])
    }

    pub fn encode_content_batch(&self, xs: &[&ImageSample]) -> Result<GaussianPosterior> {
        let batch = self.check_images(xs)?;
        Ok(self.enc_content.encode(&batch))
    }

    pub fn encode_appearance(&self, x: &ImageSample, domain: Domain) -> Result<GaussianPosterior> {
        self.encode_appearance_batch(&[x], domain)
    }

    pub fn encode_appearance_batch(
        &self,
        xs: &[&ImageSample],
        domain: Domain,
    ) -> Result<GaussianPosterior> {
        let batch = self.check_images(xs)?;
        Ok(self.appearance_encoder(domain).encode(&batch))
    }

    pub fn generate(&self, z: &LatentPair, domain: Domain) -> Result<ImageSample> {
        let c = Array::from_vec(&[1, z.content.len()], z.content.clone());
        let a = Array::from_vec(&[1, z.appearance.len()], z.appearance.clone());
        Ok(self.generate_batch(&c, &a, domain)?.remove(0))
    }

    pub fn generate_batch(
        &self,
        content: &Array<f32>,
        appearance: &Array<f32>,
        domain: Domain,
    ) -> Result<Vec<ImageSample>> {
        self.check_codes(content, self.arch.content_dim, "content")?;
        self.check_codes(appearance, self.arch.appearance_dim, "appearance")?;
        if content.rows() != appearance.rows() {
            return Err(contract("content and appearance batch sizes differ"));
        }
        let out = self.generator(domain).generate_batch(content, appearance);
        Ok(crate::data::unstack(&out, domain))
    }

    pub fn discriminate(&self, x: &ImageSample, domain: Domain) -> Result<f32> {
        Ok(self.discriminate_batch(&[x], domain)?[0])
    }

    pub fn discriminate_batch(&self, xs: &[&ImageSample], domain: Domain) -> Result<Vec<f32>> {
        let batch = self.check_images(xs)?;
        let g = Graph::new();
        let s = self
            .discriminator(domain)
            .forward(&g, g.constant(batch), Mode::Frozen);
        Ok(s.value().data().to_vec())
    }

    pub fn relation_score(
        &self,
        x_src: &ImageSample,
        x_tar: &ImageSample,
    ) -> Result<RelationScore> {
        Ok(self.relation_score_batch(&[x_src], &[x_tar])?[0])
    }

    pub fn relation_score_batch(
        &self,
        x_src: &[&ImageSample],
        x_tar: &[&ImageSample],
    ) -> Result<Vec<RelationScore>> {
        if x_src.len() != x_tar.len() {
            return Err(contract("relation batches must pair up"));
        }
        let (a, b) = (self.check_images(x_src)?, self.check_images(x_tar)?);
        let g = Graph::new();
        let s = self
            .relation
            .forward(&g, g.constant(a), g.constant(b), Mode::Frozen);
        Ok(s.value().data().iter().map(|&v| RelationScore(v)).collect())
    }

    pub fn perceptual_features(&self, x: &ImageSample) -> Result<Array<f32>> {
        let batch = self.check_images(&[x])?;
        let g = Graph::new();
        let y = self.perceptual.forward(&g, g.constant(batch));
        Ok((*y.value()).clone())
    }
}
