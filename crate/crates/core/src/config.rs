//! Run-level configuration: one JSON document that pins down every stage of
//! an experiment. A preset supplies the base values, an optional user file
//! overrides individual fields, and unknown keys anywhere in the tree are
//! rejected so a typo cannot silently fall back to a default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierTrainConfig;
use crate::data::SyntheticBenchSpec;
use crate::decomposer::DecomposerTrainConfig;
use crate::error::{Error, Result};
use crate::fgen::GanTrainConfig;
use crate::numerics::adam::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Sample the built-in benchmark from `synthetic`.
    Synthetic,
    /// Load `features.bin` / `labels.csv` / `attributes.csv` / `split.json`
    /// from `dir`.
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub dir: Option<PathBuf>,
    pub normalize_attributes: bool,
    pub synthetic: SyntheticBenchSpec,
    /// Sampling seed for the synthetic source; `None` takes the master seed.
    pub seed: Option<u64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DatasetSource::Synthetic,
            dir: None,
            normalize_attributes: true,
            synthetic: SyntheticBenchSpec::default(),
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    /// Synthetic samples drawn per unseen class.
    pub per_class: usize,
    pub seed: Option<u64>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            per_class: 200,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub write_predictions: bool,
    pub export_embeddings: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            write_predictions: true,
            export_embeddings: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed. Stage seeds left as `None` are derived from it with
    /// fixed offsets, so one number reproduces the whole run.
    pub seed: u64,
    /// Run directory; the `--out` flag overrides it.
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub decomposer: DecomposerTrainConfig,
    pub gan: GanTrainConfig,
    pub synthesis: SynthesisConfig,
    pub classifier: ClassifierTrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dataset.source == DatasetSource::Directory && self.dataset.dir.is_none() {
            return Err(Error::InvalidConfig(
                "dataset.source is \"directory\" but dataset.dir is not set".into(),
            ));
        }
        if self.dataset.source == DatasetSource::Synthetic {
            self.dataset.synthetic.validate()?;
        }
        if self.synthesis.per_class == 0 {
            return Err(Error::InvalidConfig(
                "synthesis.per_class must be positive".into(),
            ));
        }
        self.decomposer.validate()?;
        self.gan.validate()?;
        self.classifier.validate()?;
        Ok(())
    }

    /// Copy with every stage seed made explicit, so the serialized form
    /// reproduces the run without knowing the derivation rule.
    pub fn resolved(&self) -> ExperimentConfig {
        let mut cfg = self.clone();
        cfg.dataset.seed = Some(cfg.dataset.seed.unwrap_or(cfg.seed));
        cfg.decomposer.seed = Some(cfg.decomposer.seed.unwrap_or(cfg.seed.wrapping_add(1)));
        cfg.gan.seed = Some(cfg.gan.seed.unwrap_or(cfg.seed.wrapping_add(2)));
        cfg.synthesis.seed = Some(cfg.synthesis.seed.unwrap_or(cfg.seed.wrapping_add(3)));
        cfg.classifier.seed = Some(cfg.classifier.seed.unwrap_or(cfg.seed.wrapping_add(4)));
        cfg
    }

    /// Copy under a new master seed with every stage seed cleared, so the
    /// whole run rederives from the one number.
    pub fn reseeded(&self, seed: u64) -> ExperimentConfig {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.dataset.seed = None;
        cfg.decomposer.seed = None;
        cfg.gan.seed = None;
        cfg.synthesis.seed = None;
        cfg.classifier.seed = None;
        cfg
    }

    pub fn to_pretty_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Hyperparameter bundles: `Desk` is sized so a full run takes seconds on one
/// core, `Paper` keeps the published network width and learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Preset> {
        match name {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset {other:?} (expected \"desk\" or \"paper\")"
            ))),
        }
    }

    pub fn base(self) -> ExperimentConfig {
        match self {
            Preset::Desk => ExperimentConfig::default(),
            Preset::Paper => paper_config(),
        }
    }
}

fn paper_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    let slow = AdamConfig::default().with_learning_rate(1e-4);
    let slow_gan = AdamConfig { beta1: 0.5, ..slow };
    cfg.decomposer.hidden_dim = 4096;
    cfg.decomposer.venc_hidden_dim = 4096;
    cfg.decomposer.adam = slow;
    cfg.decomposer.venc_adam = slow;
    cfg.gan.hidden_dim = 4096;
    cfg.gan.critic_hidden_dim = 4096;
    cfg.gan.adam = slow_gan;
    cfg.gan.critic_adam = slow_gan;
    cfg.classifier.adam = slow;
    cfg
}

fn deep_merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Reads the user file (when given), layers it over the preset, and parses
/// the merged tree with full-depth key checking. Unknown keys are reported
/// with their path.
pub fn load_config(path: Option<&Path>, preset: Preset) -> Result<ExperimentConfig> {
    let mut merged = serde_json::to_value(preset.base()).expect("preset serializes");
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
        let user: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: p.display().to_string(),
            source: e,
        })?;
        deep_merge(&mut merged, user);
    }
    serde_path_to_error::deserialize(merged)
        .map_err(|e| Error::InvalidConfig(format!("config field {}: {}", e.path(), e.inner())))
}
