use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::delta::mona::{MonaOptions, MonaVariant};
use crate::error::{Error, Result};
use crate::params::{leaf_name, module_name, Origin};

/// Default bottleneck width shared by all adapter-style methods.
pub const DEFAULT_INTERMEDIATE_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Full,
    Fixed,
    #[serde(rename = "bitfit")]
    BitFit,
    NormTuning,
    Partial1,
    Adapter,
    #[serde(rename = "lora")]
    LoRA,
    #[serde(rename = "adaptformer")]
    AdaptFormer,
    Mona,
}

impl MethodKind {
    pub const ALL: [MethodKind; 9] = [
        MethodKind::Full,
        MethodKind::Fixed,
        MethodKind::BitFit,
        MethodKind::NormTuning,
        MethodKind::Partial1,
        MethodKind::Adapter,
        MethodKind::LoRA,
        MethodKind::AdaptFormer,
        MethodKind::Mona,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Full => "full",
            MethodKind::Fixed => "fixed",
            MethodKind::BitFit => "bitfit",
            MethodKind::NormTuning => "norm_tuning",
            MethodKind::Partial1 => "partial1",
            MethodKind::Adapter => "adapter",
            MethodKind::LoRA => "lora",
            MethodKind::AdaptFormer => "adaptformer",
            MethodKind::Mona => "mona",
        }
    }

    /// Methods that add new modules to the backbone.
    pub fn injects_modules(self) -> bool {
        matches!(
            self,
            MethodKind::Adapter | MethodKind::LoRA | MethodKind::AdaptFormer | MethodKind::Mona
        )
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .to_ascii_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        Ok(match key.as_str() {
            "full" => MethodKind::Full,
            "fixed" => MethodKind::Fixed,
            "bitfit" => MethodKind::BitFit,
            "normtuning" | "norm" => MethodKind::NormTuning,
            "partial1" => MethodKind::Partial1,
            "adapter" => MethodKind::Adapter,
            "lora" => MethodKind::LoRA,
            "adaptformer" => MethodKind::AdaptFormer,
            "mona" => MethodKind::Mona,
            _ => return Err(Error::InvalidConfig(format!("unknown method `{s}`"))),
        })
    }
}

fn default_dim() -> usize {
    DEFAULT_INTERMEDIATE_DIM
}

fn default_multiplier() -> f64 {
    1.0
}

/// Declarative description of one tuning method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Adapter bottleneck width, or LoRA rank.
    #[serde(default = "default_dim")]
    pub intermediate_dim: usize,
    /// Mona design iteration; ignored by other kinds.
    #[serde(default)]
    pub variant: MonaVariant,
    /// Learning-rate multiplier applied to origin=delta parameters.
    #[serde(default = "default_multiplier")]
    pub lr_multiplier: f64,
    #[serde(default)]
    pub mona: MonaOptions,
}

impl MethodSpec {
    pub fn new(kind: MethodKind) -> Self {
        Self {
            kind,
            intermediate_dim: DEFAULT_INTERMEDIATE_DIM,
            variant: MonaVariant::V4Final,
            lr_multiplier: 1.0,
            mona: MonaOptions::default(),
        }
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.intermediate_dim = dim;
        self
    }

    pub fn with_variant(mut self, variant: MonaVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_lr_multiplier(mut self, multiplier: f64) -> Self {
        self.lr_multiplier = multiplier;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.injects_modules() && self.intermediate_dim == 0 {
            return Err(Error::InvalidConfig(
                "intermediate_dim must be at least 1".into(),
            ));
        }
        if !(self.lr_multiplier.is_finite() && self.lr_multiplier > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lr_multiplier must be positive, got {}",
                self.lr_multiplier
            )));
        }
        Ok(())
    }

    /// Short label such as `mona-v4-64`, used in reports.
    pub fn label(&self) -> String {
        match self.kind {
            MethodKind::Mona => format!("mona-{}-{}", self.variant.label(), self.intermediate_dim),
            k if k.injects_modules() => format!("{}-{}", k.name(), self.intermediate_dim),
            k => k.name().to_string(),
        }
    }

    /// The freeze mask: whether a parameter belongs to the updated set.
    ///
    /// `last_block` is the name prefix of the final transformer block
    /// (used by Partial-1).
    pub fn is_trainable(&self, name: &str, origin: Origin, last_block: &str) -> bool {
        match origin {
            Origin::Head | Origin::Delta => true,
            Origin::Pretrained => match self.kind {
                MethodKind::Full => true,
                MethodKind::BitFit => leaf_name(name) == "bias",
                MethodKind::NormTuning => module_name(name).starts_with("norm"),
                MethodKind::Partial1 => {
                    name.starts_with(last_block) && name[last_block.len()..].starts_with('.')
                }
                MethodKind::Fixed
                | MethodKind::Adapter
                | MethodKind::LoRA
                | MethodKind::AdaptFormer
                | MethodKind::Mona => false,
            },
        }
    }
}
