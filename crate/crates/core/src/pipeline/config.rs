use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::PartitionName;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::MetricConfig;
use crate::mhacot::PromptTemplates;
use crate::mllm::BackendConfig;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

/// Everything `train`, `eval` and `infer` need. Relative paths in a config
/// file are resolved against the file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub manifest: PathBuf,
    pub cache_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub partition: PartitionName,
    pub held_out_objects: BTreeSet<String>,
    pub held_out_affordances: BTreeSet<String>,
    /// Per-category train fraction of the seen split.
    pub seen_train_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Worker threads for per-sample gradients; 0 uses every core.
    pub workers: usize,
    /// Keep only the newest this many epoch checkpoints; 0 keeps all.
    pub keep_checkpoints: usize,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub metrics: MetricConfig,
    pub prompts: PromptTemplates,
    /// Used by `infer` for images without a cached transcript.
    pub backend: Option<BackendConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.json"),
            cache_dir: PathBuf::from("cache"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            partition: PartitionName::Seen,
            held_out_objects: BTreeSet::new(),
            held_out_affordances: BTreeSet::new(),
            seen_train_ratio: 0.8,
            epochs: 65,
            batch_size: 16,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            workers: 0,
            keep_checkpoints: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            metrics: MetricConfig::default(),
            prompts: PromptTemplates::default(),
            backend: None,
        }
    }
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    std::path::absolute(&joined).unwrap_or(joined)
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes every path absolute relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        self.manifest = absolute(base, &self.manifest);
        self.cache_dir = absolute(base, &self.cache_dir);
        self.checkpoint_dir = absolute(base, &self.checkpoint_dir);
        if let Some(b) = &mut self.backend {
            if let Some(f) = &b.fixture_path {
                b.fixture_path = Some(absolute(base, f));
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        self.model.validate()?;
        if let Some(b) = &self.backend {
            b.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.json");
        std::fs::write(&p, r#"{"manifest": "data/manifest.json", "epochs": 3}"#).unwrap();
        let cfg = TrainConfig::load(&p).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg.model.channels, 512);
        assert_eq!(cfg.manifest, std::path::absolute(dir.path().join("data/manifest.json")).unwrap());
    }

    #[test]
    fn unknown_fields_and_bad_values_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.json");
        std::fs::write(&p, r#"{"epochz": 3}"#).unwrap();
        assert!(matches!(TrainConfig::load(&p), Err(Error::Config(_))));
        std::fs::write(&p, r#"{"learning_rate": -1}"#).unwrap();
        assert!(matches!(TrainConfig::load(&p), Err(Error::Config(_))));
    }

    #[test]
    fn json_round_trip() {
        let cfg = TrainConfig::default();
        let back: TrainConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
