//! Appearance augmentation by shifting the chromatic (a, b) channels in CIELAB.

use palette::{FromColor, Lab, LinSrgb, Srgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Domain, ImageSample, PairedDataset};
use crate::error::{Error, Result};
use crate::tensor::Array;

/// Nominal half-span of the a/b axes; shifted chroma is clamped to
/// `[-LAB_AB_LIMIT, LAB_AB_LIMIT]`.
pub const LAB_AB_LIMIT: f32 = 128.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Maximum absolute shift applied to each of the a and b channels.
    pub chroma_shift_range: f32,
    pub copies_per_sample: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            chroma_shift_range: 15.0,
            copies_per_sample: 8,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=LAB_AB_LIMIT).contains(&self.chroma_shift_range) {
            return Err(Error::Config(format!(
                "chroma_shift_range must lie in [0, {LAB_AB_LIMIT}], got {}",
                self.chroma_shift_range
            )));
        }
        if self.copies_per_sample == 0 {
            return Err(Error::Config("copies_per_sample must be positive".into()));
        }
        Ok(())
    }
}

/// `[-1, 1]` sRGB triple to CIELAB (D65).
pub fn rgb_to_lab(rgb: [f32; 3]) -> [f32; 3] {
    let unit = |v: f32| ((v + 1.0) * 0.5).clamp(0.0, 1.0);
    let srgb = Srgb::new(unit(rgb[0]), unit(rgb[1]), unit(rgb[2]));
    let lab = Lab::from_color(srgb.into_linear::<f32>());
    [lab.l, lab.a, lab.b]
}

/// CIELAB (D65) to a `[-1, 1]` sRGB triple, clamping out-of-gamut colours.
pub fn lab_to_rgb(lab: [f32; 3]) -> [f32; 3] {
    let lin = LinSrgb::from_color(Lab::new(lab[0], lab[1], lab[2]));
    let srgb: Srgb<f32> = Srgb::from_linear(lin);
    let signed = |v: f32| (v.clamp(0.0, 1.0) * 2.0 - 1.0).clamp(-1.0, 1.0);
    [signed(srgb.red), signed(srgb.green), signed(srgb.blue)]
}

/// Adds `shift_a`/`shift_b` to every pixel's a/b channels; L is left alone.
pub fn lab_chroma_shift(x: &ImageSample, shift_a: f32, shift_b: f32) -> ImageSample {
    let mut out = x.pixels().clone();
    for px in out.data_mut().chunks_mut(3) {
        let [l, a, b] = rgb_to_lab([px[0], px[1], px[2]]);
        let a = (a + shift_a).clamp(-LAB_AB_LIMIT, LAB_AB_LIMIT);
        let b = (b + shift_b).clamp(-LAB_AB_LIMIT, LAB_AB_LIMIT);
        px.copy_from_slice(&lab_to_rgb([l, a, b]));
    }
    ImageSample::from_clamped(out, x.domain)
}

/// Builds the augmented target pool: `copies_per_sample` shifted copies of
/// every target image, shifts uniform in `[-range, range]`, target-major order.
pub fn augment_target_pool(
    d: &PairedDataset,
    cfg: &AugmentationConfig,
    seed: u64,
) -> Result<Vec<ImageSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = cfg.chroma_shift_range;
    let mut out = Vec::with_capacity(d.n_target() * cfg.copies_per_sample);
    for x in d.target_pool() {
        for _ in 0..cfg.copies_per_sample {
            let (sa, sb) = if r > 0.0 {
                (rng.random_range(-r..=r), rng.random_range(-r..=r))
            } else {
                (0.0, 0.0)
            };
            out.push(lab_chroma_shift(x, sa, sb));
        }
    }
    Ok(out)
}

/// Uniform random pool used by tests and examples.
#[doc(hidden)]
pub fn random_image<R: Rng + ?Sized>(rng: &mut R, size: usize, domain: Domain) -> ImageSample {
    let data = (0..size * size * 3)
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();
    ImageSample::from_clamped(Array::from_vec(&[size, size, 3], data), domain)
}
