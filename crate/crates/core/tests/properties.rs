//! Invariants over randomly generated inputs.

use std::sync::{Arc, OnceLock};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fewshot_gan::data::{
    augment_random_image, augment_target_pool, lab_chroma_shift, parse_manifest,
    AugmentationConfig, Domain, ImageSample, PairedDataset,
};
use fewshot_gan::eval::{fid, kid, FeatureMoments};
use fewshot_gan::losses::{hinge_d_loss, hinge_g_loss, LossReport, Phase};
use fewshot_gan::nets::{standard_normal, ArchConfig, ConvFeatureExtractor, ModelBundle};
use fewshot_gan::tensor::{Array, Graph};

fn bundle() -> &'static ModelBundle {
    static B: OnceLock<ModelBundle> = OnceLock::new();
    B.get_or_init(|| {
        let arch = ArchConfig {
            image_size: 8,
            base_width: 4,
            stages: 2,
            content_dim: 4,
            appearance_dim: 2,
        };
        ModelBundle::new(&arch, 21, Arc::new(ConvFeatureExtractor::perceptual(3))).unwrap()
    })
}

fn features(rows: usize, f: usize, seed: u64, shift: f32) -> Array<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    standard_normal(&[rows, f], &mut rng).map(|v| v + shift)
}

#[test]
fn generators_stay_in_range_over_many_latents() {
    let b = bundle();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let zc = standard_normal(&[1000, 4], &mut rng);
    let za = standard_normal(&[1000, 2], &mut rng);
    for domain in [Domain::Source, Domain::Target] {
        for img in b.generate_batch(&zc, &za, domain).unwrap() {
            assert!(img
                .pixels()
                .data()
                .iter()
                .all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generator_output_is_bounded_for_large_codes(scale in 0.0f32..1e3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zc = standard_normal(&[2, 4], &mut rng).map(|v| v * scale);
        let za = standard_normal(&[2, 2], &mut rng).map(|v| v * scale);
        for img in bundle().generate_batch(&zc, &za, Domain::Target).unwrap() {
            prop_assert!(img.pixels().data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        }
    }

    #[test]
    fn relation_scores_are_non_negative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = augment_random_image(&mut rng, 8, Domain::Source);
        let t = augment_random_image(&mut rng, 8, Domain::Target);
        let s = bundle().relation_score(&a, &t).unwrap();
        prop_assert!(s.0 >= 0.0 && s.0.is_finite());
    }

    #[test]
    fn encoders_are_finite(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = augment_random_image(&mut rng, 8, Domain::Target);
        let q = bundle().encode_content(&x).unwrap();
        prop_assert!(q.mean.all_finite() && q.logvar.all_finite());
        let q = bundle().encode_appearance(&x, Domain::Target).unwrap();
        prop_assert!(q.mean.all_finite() && q.logvar.all_finite());
    }

    #[test]
    fn fid_is_symmetric_and_non_negative(s1 in any::<u64>(), s2 in any::<u64>(), shift in -2.0f32..2.0) {
        let m1 = FeatureMoments::from_features(&features(40, 5, s1, 0.0)).unwrap();
        let m2 = FeatureMoments::from_features(&features(30, 5, s2, shift)).unwrap();
        let (a, b) = (fid(&m1, &m2).unwrap(), fid(&m2, &m1).unwrap());
        prop_assert!(a >= -1e-9);
        prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0));
    }

    #[test]
    fn kid_is_symmetric(s1 in any::<u64>(), s2 in any::<u64>()) {
        let (a, b) = (features(12, 3, s1, 0.0), features(9, 3, s2, 0.5));
        let (x, y) = (kid(&a, &b).unwrap(), kid(&b, &a).unwrap());
        prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
    }

    #[test]
    fn hinge_losses_are_monotone(real in -3.0f64..3.0, fake in -3.0f64..3.0, delta in 0.0f64..2.0) {
        let g = Graph::<f64>::new();
        let c = |v: f64| g.constant(Array::from_vec(&[1], vec![v]));
        let d = |r: f64, f: f64| hinge_d_loss(c(r), c(f)).unwrap().item();
        prop_assert!(d(real + delta, fake) <= d(real, fake));
        prop_assert!(d(real, fake + delta) >= d(real, fake));
        prop_assert!(d(real, fake) >= 0.0);
        let gl = |f: f64| hinge_g_loss(c(f)).unwrap().item();
        prop_assert!(gl(fake + delta) <= gl(fake));
    }

    #[test]
    fn augmentation_cardinality_and_range(
        n_tar in 1usize..5,
        copies in 1usize..5,
        range in 0.0f32..40.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src: Vec<ImageSample> = (0..n_tar + 1).map(|_| augment_random_image(&mut rng, 4, Domain::Source)).collect();
        let tar: Vec<ImageSample> = (0..n_tar).map(|_| augment_random_image(&mut rng, 4, Domain::Target)).collect();
        let d = PairedDataset::new(src, tar, (0..n_tar).collect()).unwrap();
        let cfg = AugmentationConfig { chroma_shift_range: range, copies_per_sample: copies };
        let pool = augment_target_pool(&d, &cfg, seed).unwrap();
        prop_assert_eq!(pool.len(), n_tar * copies);
        prop_assert!(pool.iter().all(|x| x.pixels().data().iter().all(|v| (-1.0..=1.0).contains(v))));
    }

    #[test]
    fn chroma_shift_output_is_valid(seed in any::<u64>(), sa in -128.0f32..128.0, sb in -128.0f32..128.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = augment_random_image(&mut rng, 4, Domain::Target);
        let y = lab_chroma_shift(&x, sa, sb);
        prop_assert!(y.pixels().data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn report_lines_round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..6), step in 1u64..100_000) {
        let mut r = LossReport::new(Phase::Stage2, step);
        for (k, v) in values.iter().enumerate() {
            r.record(&format!("t{k}"), *v).unwrap();
        }
        // Log lines keep ten significant digits.
        let back = LossReport::parse_line(&r.to_line()).unwrap();
        prop_assert_eq!(back.step, r.step);
        prop_assert_eq!(back.terms().len(), r.terms().len());
        for ((n1, v1), (n2, v2)) in back.terms().iter().zip(r.terms()) {
            prop_assert_eq!(n1, n2);
            prop_assert!((v1 - v2).abs() <= 1e-9 * v2.abs());
        }
    }

    #[test]
    fn manifests_parse_back(names in prop::collection::btree_set("[a-z]{1,8}\\.png", 1..10)) {
        let text: String = names.iter().map(|n| format!("{n}\tsrc_{n}\n")).collect();
        let rows = parse_manifest(&text).unwrap();
        prop_assert_eq!(rows.len(), names.len());
        let paired = rows.iter().all(|r| r.source == format!("src_{}", r.target));
        prop_assert!(paired);
    }
}
