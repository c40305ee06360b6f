use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::explain::DEFAULT_TOP_K;
use crate::learner::TrainConfig;
use crate::metrics::{default_grid, EvalMode};
use crate::model::{Activation, ClassifierTrainConfig, ToyCnnSpec};
use crate::synth::{self, ClassRule};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub dir: PathBuf,
    /// Scene count for `synth`.
    pub count: usize,
    pub class_rule: ClassRule,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data/synth"),
            count: 2000,
            class_rule: ClassRule::ShapeKind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: Vec<usize>,
    pub activation: Activation,
    pub train: ClassifierTrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let spec = synth::default_classifier_spec(0);
        Self {
            channels: spec.channels,
            activation: spec.activation,
            train: ClassifierTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VlmConfig {
    pub epsilon: f64,
}

impl Default for VlmConfig {
    fn default() -> Self {
        Self { epsilon: 0.05 }
    }
}

/// Everything a command needs. The top-level `seed` drives every random
/// choice; nested `seed` fields are overwritten by [`RunConfig::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub vlm: VlmConfig,
    /// Concept set file; the dataset's `concepts.json` when unset.
    pub concept_set: Option<PathBuf>,
    pub translator: TrainConfig,
    /// Channels masked per association / contribution curve (clamped to the
    /// layer width).
    pub mask_k: usize,
    /// Candidates considered by `best_nra_of_top_k`; the number of captured
    /// layers when unset.
    pub eval_k: Option<usize>,
    /// Threshold grid in percent.
    pub threshold_grid: Vec<f64>,
    pub modes: Vec<EvalMode>,
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    /// Samples that get a threshold-curve plot.
    pub plot_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            vlm: VlmConfig::default(),
            concept_set: None,
            translator: TrainConfig::default(),
            mask_k: DEFAULT_TOP_K,
            eval_k: None,
            threshold_grid: default_grid(),
            modes: vec![EvalMode::BestNraOfTopK, EvalMode::Top1ByAssociation],
            out: PathBuf::from("runs"),
            jobs: 0,
            plot_samples: 8,
        }
    }
}

/// Sets `key` (dot-separated path) in a JSON object tree. The value is parsed
/// as JSON when possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(format!("override key {key:?} is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(Error::config(format!("override {key:?} descends into a non-object")));
        }
        node = node
            .as_object_mut()
            .expect("checked object")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match node.as_object_mut() {
        Some(obj) => {
            obj.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(Error::config(format!("override {key:?} descends into a non-object"))),
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::json(p, e))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(root)
            .map_err(|e| Error::config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.translator.validate()?;
        if self.mask_k == 0 {
            return Err(Error::config("mask_k must be at least 1"));
        }
        if self.eval_k == Some(0) {
            return Err(Error::config("eval_k must be at least 1"));
        }
        if self.modes.is_empty() {
            return Err(Error::config("at least one evaluation mode is required"));
        }
        crate::metrics::check_grid(&self.threshold_grid)?;
        if !(2..=4).contains(&self.model.channels.len()) {
            return Err(Error::config("model.channels must list 2 to 4 stages"));
        }
        if let Some(p) = &self.concept_set {
            if !p.is_file() {
                return Err(Error::config(format!("concept set {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Copy with nested seeds tied to the top-level seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.model.train.seed = self.seed;
        c.translator.seed = self.seed;
        c
    }

    pub fn classifier_spec(&self) -> ToyCnnSpec {
        ToyCnnSpec {
            channels: self.model.channels.clone(),
            activation: self.model.activation,
            ..synth::default_classifier_spec(self.seed)
        }
    }

    pub fn require_dataset(&self) -> Result<()> {
        if !self.dataset.dir.join("manifest.json").is_file() {
            return Err(Error::config(format!(
                "no dataset at {} (run synth first)",
                self.dataset.dir.display()
            )));
        }
        Ok(())
    }

    pub fn classifier_path(&self) -> PathBuf {
        self.out.join("classifier.json")
    }

    pub fn translator_path(&self) -> PathBuf {
        self.out.join("translator.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), cfg);
    }

    #[test]
    fn dotted_overrides() {
        let cfg = RunConfig::load(
            None,
            &[
                "translator.max_epochs=3".into(),
                "dataset.dir=/tmp/x".into(),
                "dataset.class_rule={\"rule\":\"color_biased\",\"correlation\":0.9}".into(),
                "seed=11".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.translator.max_epochs, 3);
        assert_eq!(cfg.dataset.dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.dataset.class_rule, ClassRule::ColorBiased { correlation: 0.9 });
        assert_eq!(cfg.resolved().translator.seed, 11);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::load(None, &["bogus=1".into()]).is_err());
        assert!(RunConfig::load(None, &["translator.bogus=1".into()]).is_err());
        assert!(RunConfig::load(None, &["model.train.bogus=1".into()]).is_err());
        assert!(RunConfig::load(None, &["novalue".into()]).is_err());
        assert!(RunConfig::load(None, &["concept_set=/definitely/missing.json".into()]).is_err());
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"mask_k": 5, "vlm": {"epsilon": 0.0}}"#).unwrap();
        let cfg = RunConfig::load(Some(&p), &["mask_k=7".into()]).unwrap();
        assert_eq!(cfg.mask_k, 7);
        assert_eq!(cfg.vlm.epsilon, 0.0);
    }
}
