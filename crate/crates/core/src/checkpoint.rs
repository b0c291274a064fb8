//! Safetensors checkpoints of a [`TrainState`]: every network's parameters,
//! per-network Adam moments, running weight averages, and a JSON metadata
//! record.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use safetensors::{tensor::TensorView, Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossReport, Phase};
use crate::nets::{f32_bytes, read_f32, ArchConfig, ModelBundle, NETWORK_SCOPES};
use crate::tensor::{Adam, ParamSet};
use crate::train::{ExtractorSpec, TrainState};

const FORMAT: &str = "fewshot-gan-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

/// Metadata stored alongside the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub arch: ArchConfig,
    pub seed: u64,
    pub step: u64,
    pub phase_steps: BTreeMap<Phase, u64>,
    pub completed: BTreeSet<Phase>,
    pub perceptual: ExtractorSpec,
    pub perceptual_id: String,
    optimizers: BTreeMap<String, OptimizerMeta>,
    pub history: Vec<LossReport>,
}

fn ckpt_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for scope in NETWORK_SCOPES {
        let params = state.bundle.params(scope).expect("known scope");
        for (name, a) in params.iter() {
            buffers.push((
                format!("param/{scope}/{name}"),
                a.shape().to_vec(),
                f32_bytes(a.data()),
            ));
        }
    }
    for (scope, avg) in &state.averages {
        for (name, a) in avg.iter() {
            buffers.push((
                format!("avg/{scope}/{name}"),
                a.shape().to_vec(),
                f32_bytes(a.data()),
            ));
        }
    }
    let mut optimizers = BTreeMap::new();
    for (scope, opt) in &state.optimizers {
        for (kind, name, a) in opt.moments() {
            buffers.push((
                format!("adam/{scope}/{kind}/{name}"),
                a.shape().to_vec(),
                f32_bytes(a.data()),
            ));
        }
        optimizers.insert(
            scope.clone(),
            OptimizerMeta {
                lr: opt.lr,
                beta1: opt.beta1,
                beta2: opt.beta2,
                eps: opt.eps,
                step: opt.step,
            },
        );
    }
    let meta = CheckpointMeta {
        version: VERSION,
        arch: state.bundle.arch.clone(),
        seed: state.seed,
        step: state.step,
        phase_steps: state.phase_steps.clone(),
        completed: state.completed.clone(),
        perceptual: state.perceptual.clone(),
        perceptual_id: state.bundle.perceptual.id().to_string(),
        optimizers,
        history: state.history.clone(),
    };
    // One entry keeps the header byte-stable across runs.
    let info = HashMap::from([(
        FORMAT.to_string(),
        serde_json::to_string(&meta).map_err(ckpt_err)?,
    )]);
    let views = buffers
        .iter()
        .map(|(n, s, b)| Ok((n.clone(), TensorView::new(Dtype::F32, s.clone(), b)?)))
        .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
        .map_err(ckpt_err)?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    safetensors::serialize_to_file(views, Some(info), path).map_err(ckpt_err)
}

/// Reads only the metadata record.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(ckpt_err)?;
    parse_meta(header.metadata().as_ref())
}

fn parse_meta(info: Option<&HashMap<String, String>>) -> Result<CheckpointMeta> {
    let info = info.ok_or_else(|| ckpt_err("missing metadata"))?;
    let record = info
        .get(FORMAT)
        .ok_or_else(|| ckpt_err("not a fewshot-gan checkpoint"))?;
    let meta: CheckpointMeta = serde_json::from_str(record).map_err(ckpt_err)?;
    if meta.version != VERSION {
        return Err(ckpt_err(format!(
            "unsupported checkpoint version {}",
            meta.version
        )));
    }
    Ok(meta)
}

/// Loads a checkpoint. When `expected` is given, its architecture must match
/// the stored one exactly.
pub fn load(path: &Path, expected: Option<&ArchConfig>) -> Result<TrainState> {
    let bytes = fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(ckpt_err)?;
    let meta = parse_meta(header.metadata().as_ref())?;
    if let Some(arch) = expected {
        if *arch != meta.arch {
            return Err(ckpt_err(format!(
                "architecture mismatch: checkpoint has {:?}, run expects {:?}",
                meta.arch, arch
            )));
        }
    }
    let st = SafeTensors::deserialize(&bytes).map_err(ckpt_err)?;
    let perceptual = meta.perceptual.build_perceptual()?;
    if perceptual.id() != meta.perceptual_id {
        return Err(ckpt_err(format!(
            "perceptual extractor {} does not match recorded {}",
            perceptual.id(),
            meta.perceptual_id
        )));
    }
    let mut bundle = ModelBundle::new(&meta.arch, meta.seed, perceptual)?;
    for scope in NETWORK_SCOPES {
        let params = bundle.params_mut(scope).expect("known scope");
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let a = read_f32(&st, &format!("param/{scope}/{name}")).map_err(ckpt_err)?;
            let slot = params.get_mut(&name).expect("listed name");
            if slot.shape() != a.shape() {
                return Err(ckpt_err(format!(
                    "{scope}/{name}: shape {:?} does not match {:?}",
                    a.shape(),
                    slot.shape()
                )));
            }
            *slot = a;
        }
    }
    let mut optimizers = BTreeMap::new();
    for (scope, om) in &meta.optimizers {
        let mut opt = Adam::new(om.lr, om.beta1, om.beta2);
        opt.eps = om.eps;
        opt.step = om.step;
        let prefix = format!("adam/{scope}/");
        for name in st.names() {
            if let Some(rest) = name.strip_prefix(&prefix) {
                let (kind, pname) = rest
                    .split_once('/')
                    .ok_or_else(|| ckpt_err(format!("malformed optimizer entry {name}")))?;
                opt.set_moment(kind, pname, read_f32(&st, name).map_err(ckpt_err)?);
            }
        }
        optimizers.insert(scope.clone(), opt);
    }
    let mut averages: BTreeMap<String, ParamSet<f32>> = BTreeMap::new();
    for name in st.names() {
        if let Some(rest) = name.strip_prefix("avg/") {
            let (scope, pname) = rest
                .split_once('/')
                .filter(|(scope, _)| bundle.params(scope).is_some())
                .ok_or_else(|| ckpt_err(format!("malformed average entry {name}")))?;
            averages
                .entry(scope.to_string())
                .or_insert_with(|| ParamSet::new(scope))
                .insert(pname, read_f32(&st, name).map_err(ckpt_err)?);
        }
    }
    for (scope, avg) in &averages {
        let live = bundle.params(scope).expect("checked scope");
        let same = avg.len() == live.len()
            && avg
                .iter()
                .all(|(n, a)| live.get(n).is_some_and(|b| b.shape() == a.shape()));
        if !same {
            return Err(ckpt_err(format!(
                "averaged {scope} does not match the network"
            )));
        }
    }
    let mut state = TrainState::from_parts(bundle, meta.seed, meta.perceptual.clone());
    state.averages = averages;
    state.optimizers = optimizers;
    state.step = meta.step;
    state.phase_steps = meta.phase_steps;
    state.completed = meta.completed;
    state.history = meta.history;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::ToyTask;
    use crate::train::{train_baseline_step, train_stage1_step, TrainConfig};

    fn tiny() -> ArchConfig {
        ArchConfig {
            image_size: 8,
            base_width: 4,
            stages: 2,
            content_dim: 4,
            appearance_dim: 2,
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let task = ToyTask::generate(12, 3, 0, 8, 0).unwrap();
        let cfg = TrainConfig {
            stage1_batch: 4,
            ..TrainConfig::default()
        };
        let mut st = TrainState::new(&tiny(), &cfg).unwrap();
        train_stage1_step(&mut st, &task.dataset, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        save(&st, &path).unwrap();
        let back = load(&path, Some(&tiny())).unwrap();
        assert_eq!(back.step, st.step);
        assert_eq!(back.history, st.history);
        for scope in NETWORK_SCOPES {
            let (a, b) = (
                st.bundle.params(scope).unwrap(),
                back.bundle.params(scope).unwrap(),
            );
            for (name, v) in a.iter() {
                assert_eq!(v, b.get(name).unwrap(), "{scope}/{name}");
            }
        }
        assert_eq!(back.optimizers.len(), st.optimizers.len());
    }

    #[test]
    fn round_trip_keeps_weight_averages() {
        let task = ToyTask::generate(4, 3, 0, 8, 1).unwrap();
        let cfg = TrainConfig::default();
        let mut st = TrainState::new(&tiny(), &cfg).unwrap();
        for _ in 0..2 {
            train_baseline_step(&mut st, task.dataset.target_pool(), &cfg).unwrap();
        }
        assert_eq!(st.averages.keys().collect::<Vec<_>>(), ["gen_tar"]);
        assert_ne!(
            &st.averages["gen_tar"],
            st.bundle.params("gen_tar").unwrap()
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        save(&st, &path).unwrap();
        assert_eq!(load(&path, None).unwrap().averages, st.averages);
    }

    #[test]
    fn mismatched_arch_is_a_checkpoint_error() {
        let st = TrainState::new(&tiny(), &TrainConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        save(&st, &path).unwrap();
        let other = ArchConfig {
            content_dim: 5,
            ..tiny()
        };
        assert!(matches!(
            load(&path, Some(&other)),
            Err(Error::Checkpoint(_))
        ));
    }
}
