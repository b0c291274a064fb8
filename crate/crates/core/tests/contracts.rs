//! Phase ordering, freezing, resumption and determinism of the training loop.

mod common;

use common::{param_bits, tiny_arch, tiny_config, tiny_task};
use fewshot_gan::checkpoint;
use fewshot_gan::data::augment_target_pool;
use fewshot_gan::losses::{content_distance, names, LossReport, Phase};
use fewshot_gan::train::{
    train_relation, train_relation_step, train_stage1, train_stage1_step, train_stage2,
    train_stage2_step, Ablation, TrainConfig, TrainState,
};
use fewshot_gan::Error;

fn after_stage1(cfg: &TrainConfig, steps: u64) -> (TrainState, fewshot_gan::toy::ToyTask) {
    let task = tiny_task(cfg.seed);
    let mut st = TrainState::new(&tiny_arch(), cfg).unwrap();
    train_stage1(&mut st, &task.dataset, cfg, steps, |_| {}).unwrap();
    (st, task)
}

#[test]
fn later_phases_refuse_to_run_early() {
    let cfg = tiny_config(0);
    let task = tiny_task(0);
    let mut st = TrainState::new(&tiny_arch(), &cfg).unwrap();
    assert!(matches!(
        train_relation_step(&mut st, &task.dataset, &cfg),
        Err(Error::PhaseOrder(_))
    ));
    assert!(matches!(
        train_stage2_step(&mut st, &task.dataset, &cfg),
        Err(Error::PhaseOrder(_))
    ));

    let (mut st, task) = after_stage1(&cfg, 2);
    assert!(matches!(
        train_stage2_step(&mut st, &task.dataset, &cfg),
        Err(Error::PhaseOrder(_))
    ));
    let no_rel = TrainConfig {
        ablation: Ablation::NO_RELATION,
        ..cfg
    };
    assert!(train_stage2_step(&mut st, &task.dataset, &no_rel).is_ok());
}

#[test]
fn stage2_leaves_source_side_bit_unchanged() {
    let cfg = tiny_config(3);
    let (mut st, task) = after_stage1(&cfg, 3);
    train_relation(&mut st, &task.dataset, &cfg, 3, |_| {}).unwrap();
    let frozen = [
        "enc_content",
        "enc_app_src",
        "gen_src",
        "disc_src",
        "relation",
    ];
    let before: Vec<_> = frozen.iter().map(|s| param_bits(&st.bundle, s)).collect();
    let tar_before = param_bits(&st.bundle, "gen_tar");
    train_stage2(&mut st, &task.dataset, &cfg, 4, |_| {}).unwrap();
    for (scope, b) in frozen.iter().zip(before) {
        assert_eq!(
            param_bits(&st.bundle, scope),
            b,
            "{scope} changed during stage 2"
        );
    }
    assert_ne!(param_bits(&st.bundle, "gen_tar"), tar_before);
}

#[test]
fn stage1_does_not_touch_target_networks() {
    let cfg = tiny_config(4);
    let st0 = TrainState::new(&tiny_arch(), &cfg).unwrap();
    let (st, _) = after_stage1(&cfg, 3);
    for scope in ["enc_app_tar", "gen_tar", "disc_tar", "relation"] {
        assert_eq!(
            param_bits(&st.bundle, scope),
            param_bits(&st0.bundle, scope),
            "{scope}"
        );
    }
}

/// Saves after `k` steps of `phase`, reloads, runs five more and compares
/// with an uninterrupted run.
fn resume_matches(phase: Phase) {
    let cfg = tiny_config(5);
    let task = tiny_task(5);
    let d = &task.dataset;
    let prepare = || {
        let mut st = TrainState::new(&tiny_arch(), &cfg).unwrap();
        if phase != Phase::Stage1 {
            train_stage1(&mut st, d, &cfg, 2, |_| {}).unwrap();
        }
        if phase == Phase::Stage2 {
            train_relation(&mut st, d, &cfg, 2, |_| {}).unwrap();
        }
        st
    };
    let step = |st: &mut TrainState| match phase {
        Phase::Stage1 => train_stage1_step(st, d, &cfg).unwrap(),
        Phase::Relation => train_relation_step(st, d, &cfg).unwrap(),
        Phase::Stage2 => train_stage2_step(st, d, &cfg).unwrap(),
        Phase::Baseline => unreachable!(),
    };
    let k = 3;
    let mut straight = prepare();
    let full: Vec<LossReport> = (0..k + 5).map(|_| step(&mut straight)).collect();

    let mut first = prepare();
    for _ in 0..k {
        step(&mut first);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.safetensors");
    checkpoint::save(&first, &path).unwrap();
    let mut resumed = checkpoint::load(&path, Some(&tiny_arch())).unwrap();
    let tail: Vec<LossReport> = (0..5).map(|_| step(&mut resumed)).collect();
    assert_eq!(tail, full[k as usize..], "{phase}");
    for scope in fewshot_gan::nets::NETWORK_SCOPES {
        assert_eq!(
            param_bits(&resumed.bundle, scope),
            param_bits(&straight.bundle, scope),
            "{phase}/{scope}"
        );
    }
    assert_eq!(resumed.averages, straight.averages, "{phase} averages");
}

#[test]
fn resume_stage1() {
    resume_matches(Phase::Stage1);
}

#[test]
fn resume_relation() {
    resume_matches(Phase::Relation);
}

#[test]
fn resume_stage2() {
    resume_matches(Phase::Stage2);
}

fn pipeline_history(seed: u64) -> Vec<LossReport> {
    let cfg = tiny_config(seed);
    let (mut st, task) = after_stage1(&cfg, 3);
    train_relation(&mut st, &task.dataset, &cfg, 2, |_| {}).unwrap();
    train_stage2(&mut st, &task.dataset, &cfg, 3, |_| {}).unwrap();
    st.history
}

#[test]
fn fixed_seed_gives_identical_loss_streams() {
    let a = pipeline_history(11);
    assert_eq!(a.len(), 8);
    assert_eq!(a, pipeline_history(11));
    assert_ne!(a, pipeline_history(12));
}

#[test]
fn ablations_drop_their_terms() {
    let base = tiny_config(6);
    let (st1, task) = after_stage1(&base, 2);
    for (ablation, absent) in [
        (Ablation::NO_RELATION, vec![names::RG_TAR]),
        (
            Ablation::NO_RELATION_NO_ADVERSARIAL,
            vec![names::RG_TAR, names::IA_D_TAR, names::IA_G_TAR],
        ),
    ] {
        let cfg = TrainConfig {
            ablation,
            ..base.clone()
        };
        let mut st = st1.clone();
        let r = train_stage2_step(&mut st, &task.dataset, &cfg).unwrap();
        for name in absent {
            assert!(r.get(name).is_none(), "{} logged {name}", ablation.label());
        }
        assert!(r.get(names::IR_TAR).is_some());
    }
    let invalid = Ablation {
        no_relation: false,
        no_adversarial: true,
    };
    assert!(invalid.validate().is_err());
}

#[test]
fn augmented_pool_cardinality() {
    let cfg = tiny_config(7);
    let task = tiny_task(7);
    let pool = augment_target_pool(&task.dataset, &cfg.augmentation, 1).unwrap();
    assert_eq!(
        pool.len(),
        task.dataset.n_target() * cfg.augmentation.copies_per_sample
    );
    let again = augment_target_pool(&task.dataset, &cfg.augmentation, 1).unwrap();
    assert!(pool
        .iter()
        .zip(&again)
        .all(|(a, b)| a.pixels() == b.pixels()));
}

#[test]
fn paired_content_distance_is_zero() {
    let cfg = tiny_config(8);
    let (st, task) = after_stage1(&cfg, 2);
    let d = &task.dataset;
    for i in 0..d.n_target() {
        let paired = d.paired_source(i).unwrap();
        assert_eq!(content_distance(&st.bundle, paired, i, d).unwrap(), 0.0);
    }
}
