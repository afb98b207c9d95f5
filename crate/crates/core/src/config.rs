//! Run configuration files: versioned JSON, unknown keys rejected, every
//! precondition checked up front and reported together.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::fewshot::EvalConfig;
use crate::model::{BackboneConfig, ModelConfig};
use crate::mospool::PoolConfig;
use crate::pretrain::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Model settings; the number of base classes comes from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default = "default_proj_dim")]
    pub proj_dim: usize,
    #[serde(default)]
    pub pool: PoolConfig,
}

fn default_proj_dim() -> usize {
    64
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            backbone: BackboneConfig::default(),
            proj_dim: default_proj_dim(),
            pool: PoolConfig::default(),
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, num_base_classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            num_base_classes,
            proj_dim: self.proj_dim,
            pool: self.pool,
        }
    }
}

/// Everything one pretrain + eval run needs. `seed` drives both stages;
/// the stage sections may not carry their own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub dataset: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    /// Parses and validates, resolving relative paths against `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<RunConfig> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let mut problems = Vec::new();
        for section in ["train", "eval"] {
            if raw.get(section).and_then(|s| s.get("seed")).is_some() {
                problems.push(format!("{section}.seed is not allowed; set the top-level seed"));
            }
        }
        let mut cfg: RunConfig = serde_json::from_value(raw).map_err(|e| Error::Config(vec![e.to_string()]))?;
        if cfg.dataset.is_relative() {
            cfg.dataset = base_dir.join(&cfg.dataset);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base_dir.join(&cfg.output_dir);
        }
        cfg.train.seed = cfg.seed;
        cfg.eval.seed = cfg.seed;
        problems.extend(cfg.problems());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        RunConfig::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Every violated precondition across all sections.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.version != CONFIG_VERSION {
            p.push(format!("version must be {CONFIG_VERSION}, got {}", self.version));
        }
        match DatasetManifest::load(&self.dataset) {
            Ok(m) => {
                if m.image_shape != self.model.backbone.input_shape {
                    p.push(format!(
                        "model.backbone.input_shape {:?} does not match the dataset images {:?}",
                        self.model.backbone.input_shape, m.image_shape
                    ));
                }
            }
            Err(Error::Config(list)) => p.extend(list.into_iter().map(|e| format!("dataset: {e}"))),
            Err(e) => p.push(format!("dataset {}: {e}", self.dataset.display())),
        }
        p.extend(self.model.model_config(1).problems());
        p.extend(self.train.problems());
        p.extend(self.eval.problems());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_data, GenConfig};

    fn dataset_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        gen_data(
            &GenConfig {
                classes: 10,
                per_class: 3,
                image_shape: [3, 8, 8],
                skew: 1.0,
                seed: 0,
            },
            &dir.path().join("data"),
        )
        .unwrap();
        dir
    }

    fn minimal(extra: &str) -> String {
        format!(
            r#"{{"version": 1, "dataset": "data", "model": {{"backbone": {{"blocks": [{{"out_channels": 4, "pool": true}}], "input_shape": [3, 8, 8]}}}}{extra}}}"#
        )
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let dir = dataset_dir();
        let cfg = RunConfig::from_json(&minimal(r#", "seed": 9"#), dir.path()).unwrap();
        assert_eq!(cfg.train.epochs, 130);
        assert_eq!((cfg.train.seed, cfg.eval.seed), (9, 9));
        assert_eq!(cfg.eval.episodes, 2000);
        assert_eq!(cfg.dataset, dir.path().join("data"));
    }

    #[test]
    fn unknown_keys_are_errors() {
        let dir = dataset_dir();
        let err = RunConfig::from_json(&minimal(r#", "trian": {}"#), dir.path()).unwrap_err();
        assert!(err.to_string().contains("trian"), "{err}");
        let err = RunConfig::from_json(&minimal(r#", "train": {"lr": 0.1}"#), dir.path()).unwrap_err();
        assert!(err.to_string().contains("lr"), "{err}");
    }

    #[test]
    fn missing_dataset_names_the_field() {
        let err = RunConfig::from_json(r#"{"version": 1}"#, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("dataset"), "{err}");
    }

    #[test]
    fn problems_are_listed_together() {
        let dir = dataset_dir();
        let text = minimal(r#", "version": 2, "train": {"epochs": 0, "lr0": -1, "seed": 3}, "eval": {"way": 0}"#)
            .replacen(r#""version": 1, "#, "", 1);
        let Err(Error::Config(list)) = RunConfig::from_json(&text, dir.path()) else {
            panic!("expected a config error");
        };
        assert_eq!(list.len(), 5, "{list:?}");
    }

    #[test]
    fn shape_mismatch_with_dataset_is_reported() {
        let dir = dataset_dir();
        let text = minimal("").replace("[3, 8, 8]", "[3, 16, 16]");
        let err = RunConfig::from_json(&text, dir.path()).unwrap_err();
        assert!(err.to_string().contains("input_shape"), "{err}");
    }
}
