//! JSON run descriptions.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::delta::MethodSpec;
use crate::error::{Error, Result};
use crate::harness::{AdamWConfig, SyntheticDatasetSpec, TrainOptions};
use crate::init::derive_seed;

/// A named preset (`{"preset": "toy"}`) or an explicit configuration
/// (`{"custom": {...}}`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneChoice {
    Preset(String),
    Custom(BackboneConfig),
}

fn default_batch_size() -> usize {
    16
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneChoice,
    pub method: MethodSpec,
    pub dataset: SyntheticDatasetSpec,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds the backbone weights, injected modules and minibatch order.
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// The backbone the run builds. Presets take their class count and
    /// input size from the dataset; custom configs must already agree.
    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        let cfg = match &self.backbone {
            BackboneChoice::Preset(name) => {
                let mut cfg = BackboneConfig::preset(name)?;
                cfg.num_classes = self.dataset.num_classes;
                cfg.input_size = self.dataset.image_size;
                cfg
            }
            BackboneChoice::Custom(cfg) => {
                if cfg.num_classes != self.dataset.num_classes
                    || cfg.input_size != self.dataset.image_size
                {
                    return Err(Error::InvalidConfig(format!(
                        "backbone expects {} classes at {}px, dataset has {} at {}px",
                        cfg.num_classes,
                        cfg.input_size,
                        self.dataset.num_classes,
                        self.dataset.image_size
                    )));
                }
                cfg.clone()
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Short description of the backbone for reports.
    pub fn backbone_label(&self) -> String {
        match &self.backbone {
            BackboneChoice::Preset(name) => name.clone(),
            BackboneChoice::Custom(_) => "custom".into(),
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            optimizer: self.optimizer,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: derive_seed(self.seed, "train"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        self.dataset.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        self.backbone_config().map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delta::MethodKind;

    const MINIMAL: &str = r#"{
        "backbone": {"preset": "toy"},
        "method": {"kind": "mona", "intermediate_dim": 8},
        "dataset": {"num_classes": 4, "samples_per_class": 10, "image_size": 8, "seed": 7},
        "epochs": 2,
        "seed": 1
    }"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.method.kind, MethodKind::Mona);
        assert_eq!(cfg.optimizer, AdamWConfig::default());
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.backbone_config().unwrap().num_classes, 4);
    }

    #[test]
    fn roundtrip_is_fixed_point() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        let again = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_json(), cfg.to_json());
    }

    #[test]
    fn missing_field_is_named() {
        let text = MINIMAL.replace("\"epochs\": 2,", "");
        let err = RunConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("missing field `epochs`"), "{err}");
    }

    #[test]
    fn unknown_field_rejected() {
        let text = MINIMAL.replace("\"seed\": 1", "\"seed\": 1, \"lr\": 3");
        assert!(RunConfig::from_json(&text).is_err());
    }
}
