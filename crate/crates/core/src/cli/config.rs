//! Run configuration: a JSON file with nested blocks for the encoder,
//! training, and preprocessing settings. Command-line flags override file
//! values; unknown fields are rejected with a field-level message.

use crate::dataset::SplitSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::preprocess::PreprocessConfig;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Architecture preset name: "paper" or "tiny".
    pub preset: Option<String>,
    /// Explicit encoder architecture; wins over `preset` in the same file.
    pub encoder: Option<EncoderConfig>,
    pub train: TrainConfig,
    pub preprocess: Option<PreprocessConfig>,
    pub dataset_root: Option<PathBuf>,
    pub split: SplitSpec,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn preset_config(name: &str) -> Result<EncoderConfig> {
        match name {
            "paper" => Ok(EncoderConfig::paper()),
            "tiny" => Ok(EncoderConfig::tiny()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected 'paper' or 'tiny')"
            ))),
        }
    }

    /// Encoder architecture after applying the flag-over-file precedence.
    pub fn resolve_encoder(&self, preset_flag: Option<&str>) -> Result<EncoderConfig> {
        let cfg = if let Some(name) = preset_flag {
            Self::preset_config(name)?
        } else if let Some(explicit) = self.encoder {
            explicit
        } else if let Some(name) = &self.preset {
            Self::preset_config(name)?
        } else {
            EncoderConfig::tiny()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Preprocessing settings consistent with the encoder input size.
    pub fn resolve_preprocess(&self, encoder: &EncoderConfig) -> Result<PreprocessConfig> {
        let pre = self
            .preprocess
            .unwrap_or_else(|| PreprocessConfig::for_target(encoder.image_size));
        if pre.target_size != encoder.image_size {
            return Err(Error::Config(format!(
                "preprocess.target_size {} disagrees with encoder image size {}",
                pre.target_size, encoder.image_size
            )));
        }
        pre.validate()?;
        Ok(pre)
    }
}
