//! TOML run configuration used by the command-line tool.
//!
//! ```toml
//! [model]
//! latent_channels = 4
//! variant = "decoupled_blend"
//!
//! [regularizer]
//! kind = { kind = "fsq", levels = [8, 8, 8, 8] }
//!
//! [train]
//! steps = 200
//!
//! [data]
//! height = 64
//! width = 64
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ModelConfig, TokenizerConfig};
use crate::quantize::RegularizerConfig;
use crate::train::{SynthConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Defaults to FSQ with 8 levels on every latent channel.
    pub regularizer: Option<RegularizerConfig>,
    pub train: TrainConfig,
    pub data: SynthConfig,
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn tokenizer_config(&self) -> Result<TokenizerConfig> {
        let reg = self
            .regularizer
            .clone()
            .unwrap_or_else(|| RegularizerConfig::fsq(&vec![8; self.model.latent_channels]));
        let cfg = TokenizerConfig::new(self.model.clone(), reg);
        cfg.validate()?;
        Ok(cfg)
    }
}
