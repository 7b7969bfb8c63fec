//! Declarative experiment configuration (JSON, snake_case keys).

use crate::data::{DomainSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::net::{NormChoice, PresetName};
use serde::{Deserialize, Serialize};
use std::path::Path;

fn default_epsilon() -> f64 {
    crate::norm::DEFAULT_EPSILON
}
fn default_lr() -> f64 {
    1e-3
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_batch_size() -> usize {
    256
}
fn default_val_fraction() -> f64 {
    0.2
}
fn default_patience() -> usize {
    10
}
fn default_gmm_sample_rows() -> usize {
    10_000
}
fn default_components() -> usize {
    3
}
fn default_tap() -> String {
    "norm_slot".into()
}
fn default_lr_schedule() -> String {
    "constant".into()
}
fn default_eval_mode() -> String {
    "per_context".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Superclass-style task from [`SynthSpec`].
    Synthetic { spec: SynthSpec },
    /// Two-domain task from [`DomainSpec`]; the validation split holds out
    /// target-domain rows.
    SyntheticDomain { spec: DomainSpec },
    /// MNIST-format IDX files; the test pair is the validation split.
    Idx {
        images: String,
        labels: String,
        test_images: String,
        test_labels: String,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum ContextStrategyConfig {
    /// Keep the labels the dataset came with.
    #[default]
    Native,
    SuperclassMap {
        path: String,
    },
    DomainTag,
    /// Mixture-derived contexts; fit at the tap unless a model file is given.
    Gmm {
        #[serde(default)]
        model_path: Option<String>,
        #[serde(default = "default_components")]
        components: usize,
        /// "input" (raw features) or "norm_slot" (activations entering the
        /// swapped normalization slot).
        #[serde(default = "default_tap")]
        tap: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    #[serde(default)]
    pub widths: Vec<usize>,
    pub norm_choice: String,
    /// 1-based normalization slot carrying `norm_choice`; defaults to 3 for
    /// convnet4 and 1 otherwise.
    #[serde(default)]
    pub norm_position: Option<usize>,
    /// Learn a per-channel scale/shift after normalization (ablation knob).
    #[serde(default)]
    pub norm_affine: bool,
    /// Force normalization layers to the identity (plumbing isolation).
    #[serde(default)]
    pub norm_identity: bool,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub context_strategy: ContextStrategyConfig,
    /// Standardize features with the training split's per-channel moments.
    #[serde(default)]
    pub standardize: bool,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// "constant" or "cosine".
    #[serde(default = "default_lr_schedule")]
    pub lr_schedule: String,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    /// "per_context" or "aggregate" (collective inference).
    #[serde(default = "default_eval_mode")]
    pub eval_mode: String,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub early_stopping: bool,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Row cap for EM fits on activation taps.
    #[serde(default = "default_gmm_sample_rows")]
    pub gmm_sample_rows: usize,
    /// Mixture components for a mixture-normalization slot.
    #[serde(default = "default_components")]
    pub mn_components: usize,
    /// Fitted mixture for the MN slot; fitted at the tap when absent.
    #[serde(default)]
    pub mn_model_path: Option<String>,
    #[serde(default)]
    pub out_dir: Option<String>,
    #[serde(default)]
    pub run_id: Option<String>,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn preset_name(&self) -> Result<PresetName> {
        self.preset.parse()
    }

    pub fn norm(&self) -> Result<NormChoice> {
        self.norm_choice.parse()
    }

    /// 1-based slot position of the swapped normalization layer.
    pub fn norm_position(&self) -> Result<usize> {
        Ok(match self.norm_position {
            Some(p) => p,
            None => match self.preset_name()? {
                PresetName::Convnet4 => 3,
                _ => 1,
            },
        })
    }

    pub fn widths_or_default(&self) -> Result<Vec<usize>> {
        if !self.widths.is_empty() {
            return Ok(self.widths.clone());
        }
        Ok(match self.preset_name()? {
            PresetName::Convnet4 => vec![8, 8, 8, 8],
            PresetName::Mlp2 | PresetName::DomainClf => vec![32],
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.preset_name()?;
        self.norm()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        match self.lr_schedule.as_str() {
            "constant" | "cosine" => {}
            other => return Err(Error::Config(format!("unknown lr schedule '{other}'"))),
        }
        match self.eval_mode.as_str() {
            "per_context" | "aggregate" => {}
            other => return Err(Error::Config(format!("unknown eval mode '{other}'"))),
        }
        let mut referenced: Vec<&str> = Vec::new();
        if let DatasetConfig::Idx {
            images,
            labels,
            test_images,
            test_labels,
            ..
        } = &self.dataset
        {
            referenced.extend([
                images.as_str(),
                labels.as_str(),
                test_images.as_str(),
                test_labels.as_str(),
            ]);
        }
        if let ContextStrategyConfig::SuperclassMap { path } = &self.context_strategy {
            referenced.push(path.as_str());
        }
        if let ContextStrategyConfig::Gmm {
            model_path: Some(p),
            tap,
            ..
        } = &self.context_strategy
        {
            referenced.push(p.as_str());
            if tap != "input" && tap != "norm_slot" {
                return Err(Error::Config(format!("unknown gmm tap '{tap}'")));
            }
        }
        if let ContextStrategyConfig::Gmm {
            model_path: None,
            tap,
            components,
        } = &self.context_strategy
        {
            if tap != "input" && tap != "norm_slot" {
                return Err(Error::Config(format!("unknown gmm tap '{tap}'")));
            }
            if *components == 0 {
                return Err(Error::Config("gmm components must be at least 1".into()));
            }
        }
        if let Some(p) = &self.mn_model_path {
            referenced.push(p.as_str());
        }
        for path in referenced {
            if !Path::new(path).exists() {
                return Err(Error::Config(format!(
                    "referenced file does not exist: {path}"
                )));
            }
        }
        Ok(())
    }

    /// Stable run identifier: explicit `run_id`, otherwise a digest of the
    /// canonical config JSON (so identical configs collide on purpose).
    pub fn run_id(&self) -> String {
        if let Some(id) = &self.run_id {
            return id.clone();
        }
        let text = serde_json::to_string(self).unwrap_or_default();
        let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.as_bytes() {
            acc ^= u64::from(*b);
            acc = acc.wrapping_mul(0x100_0000_01b3);
        }
        format!("{}-{}-{:08x}", self.preset, self.norm_choice, acc as u32)
    }
}
