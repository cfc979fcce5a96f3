//! Experiment configuration: a JSON file with nested sections `model`,
//! `adapter`, `train`, `task`, `missing`, and `sweep`. Unknown keys are hard
//! errors, and parse failures carry the offending field path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mora::adapters::AdapterConfig;
use mora::data::{MissingSpec, SyntheticTaskSpec};
use mora::error::{Error, Result};
use mora::model::{Method, ModelConfig};
use mora::training::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingSection {
    /// Availability rates applied to the train and validation splits.
    pub train: MissingSpec,
    /// Availability rates evaluated on the test split; defaults to the
    /// train rates when omitted.
    #[serde(default)]
    pub test: Vec<MissingSpec>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Train-side rates for the grid sweep; defaults to `missing.train`.
    pub train_specs: Vec<MissingSpec>,
    /// Test-side rates for the grid sweep; defaults to `missing.test`.
    pub test_specs: Vec<MissingSpec>,
    /// Total missing rates expanded into symmetric test specs
    /// (avail = 1 - eta/2 per modality).
    pub etas: Vec<f64>,
    /// Adapter ranks for the rank ablation.
    pub ranks: Vec<usize>,
    /// Plugged-block sets for the block ablation.
    pub block_sets: Vec<Vec<usize>>,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_num_samples() -> usize {
    400
}

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

fn default_method() -> Method {
    Method::Mora
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Convenience section mirrored into `model.adapter` when present.
    #[serde(default)]
    pub adapter: Option<AdapterConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    pub task: SyntheticTaskSpec,
    pub missing: MissingSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_num_samples")]
    pub num_samples: usize,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

/// CLI flags that override file values.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub method: Option<Method>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            Error::Config(format!(
                "{}: at `{}`: {}",
                path.display(),
                e.path(),
                e.inner()
            ))
        })?;
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, overrides: Overrides) {
        if let Some(seeds) = overrides.seeds {
            self.seeds = seeds;
        }
        if let Some(method) = overrides.method {
            self.method = method;
        }
        if let Some(out) = overrides.out_dir {
            self.out_dir = Some(out);
        }
    }

    /// Folds the `adapter` section into the model and fills defaulted lists.
    pub fn normalize(&mut self) {
        if let Some(adapter) = self.adapter.take() {
            self.model.adapter = adapter;
        }
        if self.missing.test.is_empty() {
            self.missing.test = vec![self.missing.train];
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate()?;
        self.missing.train.validate()?;
        for spec in &self.missing.test {
            spec.validate()?;
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.num_samples == 0 {
            return Err(Error::Config("num_samples must be >= 1".into()));
        }
        for eta in &self.sweep.etas {
            if !(0.0..=1.0).contains(eta) {
                return Err(Error::Config(format!("eta {eta} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    /// Hash of the canonical config serialization, with the output
    /// directory masked so relocating a run does not change its identity.
    pub fn spec_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

    pub fn resolved_out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "model": {
                "hidden_dim": 16, "num_blocks": 1, "num_heads": 2,
                "mlp_ratio": 2, "vocab_size": 32, "max_text_len": 4,
                "image_grid": 2, "patch_dim": 6, "num_labels": 3
            },
            "task": {
                "num_labels": 3, "prevalence": [0.5, 0.4, 0.3],
                "image_signal": 1.0, "text_signal": 2.0, "vocab_size": 32
            },
            "missing": { "train": { "avail_img": 0.65, "avail_txt": 0.65 } }
        }"#
        .to_string()
    }

    fn write_config(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn loads_minimal_config_with_defaults() {
        let (_dir, path) = write_config(&minimal_json());
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.method, Method::Mora);
        assert_eq!(cfg.train.max_lr, 5e-3);
        assert_eq!(cfg.missing.test.len(), 1);
        assert_eq!(cfg.missing.test[0].avail_img, 0.65);
    }

    #[test]
    fn unknown_keys_are_hard_errors_with_field_path() {
        let bad = minimal_json().replace("\"missing\"", "\"missign\"");
        let (_dir, path) = write_config(&bad);
        let err = ExperimentConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("missign"), "{err}");

        let nested_bad = minimal_json().replace("\"hidden_dim\"", "\"hiden_dim\"");
        let (_dir2, path2) = write_config(&nested_bad);
        let err = ExperimentConfig::load(&path2).unwrap_err().to_string();
        assert!(err.contains("model"), "{err}");
    }

    #[test]
    fn adapter_section_overrides_model_adapter() {
        let with_adapter = minimal_json().replace(
            "\"missing\"",
            "\"adapter\": { \"rank\": 7 }, \"missing\"",
        );
        let (_dir, path) = write_config(&with_adapter);
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.model.adapter.rank, 7);
    }

    #[test]
    fn spec_hash_ignores_out_dir_only() {
        let (_dir, path) = write_config(&minimal_json());
        let mut a = ExperimentConfig::load(&path).unwrap();
        let mut b = a.clone();
        a.out_dir = Some(PathBuf::from("x"));
        b.out_dir = Some(PathBuf::from("y"));
        assert_eq!(a.spec_hash(), b.spec_hash());
        b.seeds = vec![9];
        assert_ne!(a.spec_hash(), b.spec_hash());
    }

    #[test]
    fn overrides_replace_file_values() {
        let (_dir, path) = write_config(&minimal_json());
        let mut cfg = ExperimentConfig::load(&path).unwrap();
        cfg.apply(Overrides {
            seeds: Some(vec![5]),
            method: Some(Method::None),
            out_dir: Some(PathBuf::from("elsewhere")),
        });
        assert_eq!(cfg.seeds, vec![5]);
        assert_eq!(cfg.method, Method::None);
        assert_eq!(cfg.resolved_out_dir(), PathBuf::from("elsewhere"));
    }

    #[test]
    fn infeasible_missing_rates_fail_validation() {
        let bad = minimal_json().replace("0.65, \"avail_txt\": 0.65", "0.4, \"avail_txt\": 0.5");
        let (_dir, path) = write_config(&bad);
        assert!(ExperimentConfig::load(&path).is_err());
    }
}
