//! Run configuration: a TOML file with one section per module, dotted-key
//! overrides, and a snapshot written into every run directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::eval::SynthesisManner;
use crate::nets::ArchConfig;
use crate::train::{ExtractorSpec, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source_dir: PathBuf,
    pub target_dir: PathBuf,
    pub manifest: PathBuf,
    /// Held-out target images used as the metric reference when present.
    pub eval_dir: Option<PathBuf>,
}

impl DataConfig {
    /// Paths of a directory written by `make-toy`.
    pub fn toy(root: &Path) -> Self {
        let eval = root.join("target_eval");
        Self {
            source_dir: root.join("source"),
            target_dir: root.join("target"),
            manifest: root.join("manifest.tsv"),
            eval_dir: eval.is_dir().then_some(eval),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub manner: SynthesisManner,
    pub n_generated: usize,
    pub seed: u64,
    pub extractor: ExtractorSpec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            manner: SynthesisManner::Rand,
            n_generated: 1000,
            seed: 0,
            extractor: ExtractorSpec::Random { seed: 0xE7A1 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Periodic checkpoint interval in steps; 0 disables periodic checkpoints.
    pub checkpoint_interval: u64,
    /// Steps used for the target-only baseline.
    pub baseline_steps: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            checkpoint_interval: 500,
            baseline_steps: 2000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub run: RunSection,
}

impl RunConfig {
    /// Defaults, then the optional file, then `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        if self.eval.n_generated < 2 {
            return Err(Error::Config("eval.n_generated must be at least 2".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn snapshot(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

/// Applies `a.b.c=value`. The value is parsed as a TOML literal when possible
/// and kept as a string otherwise.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let (last, parents) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::load(
            None,
            &[
                "arch.content_dim=16".into(),
                "train.stage2_weights.relation=0.5".into(),
                "eval.manner=\"syn\"".into(),
                "data.manifest=m.tsv".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.arch.content_dim, 16);
        assert_eq!(cfg.train.stage2_weights.relation, 0.5);
        assert_eq!(cfg.eval.manner, SynthesisManner::Syn);
        assert_eq!(cfg.data.manifest, PathBuf::from("m.tsv"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::load(None, &["arch.contentdim=3".into()]).is_err());
        assert!(RunConfig::load(None, &["nonsense".into()]).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
