//! Run configuration: one TOML file with a section per component.
//!
//! ```toml
//! [preprocess]
//! background_kernel_radius = 15
//! [patch]
//! train_scales = [64, 96, 128]
//! [backbone]
//! base_width = 32
//! [train]
//! lr0 = 0.05
//! ```
//!
//! Omitted sections and keys take their defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hcnet::{ActivationParams, BackboneConfig};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::pipeline::TrainConfig;
use crate::preprocess::PreprocessConfig;
use crate::synth::{PhantomSpec, SplitCounts};
use crate::tiler::PatchSpec;
use crate::uncertainty::LatentConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preprocess: PreprocessConfig,
    pub patch: PatchSpec,
    pub backbone: BackboneConfig,
    pub activation: ActivationParams,
    pub latent: LatentConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub phantom: PhantomSpec,
    pub splits: SplitCounts,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Toml(t) => Error::Config(format!("{}: {t}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone,
            activation: self.activation,
            latent: self.latent,
        }
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.model().validate()?;
        self.patch.validate(self.backbone.size_multiple())?;
        self.loss.validate()?;
        self.train.validate()?;
        self.phantom.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
