#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;

use fewshot_gan::nets::{ArchConfig, ModelBundle, NETWORK_SCOPES};
use fewshot_gan::toy::ToyTask;
use fewshot_gan::train::TrainConfig;

pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        image_size: 8,
        base_width: 4,
        stages: 2,
        content_dim: 4,
        appearance_dim: 2,
    }
}

pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        stage1_batch: 4,
        stage2_batch: 4,
        relation_batch: 8,
        relation_probe_pairs: 16,
        ..TrainConfig::default()
    }
}

pub fn tiny_task(seed: u64) -> ToyTask {
    ToyTask::generate(40, 6, 0, 8, seed).unwrap()
}

/// Bit patterns of every parameter under `scope`, in name order.
pub fn param_bits(bundle: &ModelBundle, scope: &str) -> Vec<(String, Vec<u32>)> {
    assert!(NETWORK_SCOPES.contains(&scope), "unknown scope {scope}");
    let mut out: Vec<_> = bundle
        .params(scope)
        .unwrap()
        .iter()
        .map(|(n, a)| {
            (
                n.to_string(),
                a.data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect();
    out.sort();
    out
}
