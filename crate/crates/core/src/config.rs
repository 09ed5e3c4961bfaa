//! Run configuration read from TOML.
//!
//! ```toml
//! [model]
//! d = 32
//! layers = 2
//!
//! [train]
//! epochs = 40
//! seed = 7
//!
//! [data]
//! ambiguity = 0.5
//! ```
//!
//! Every key is optional; absent keys keep their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GeneratorSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: GeneratorSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()
    }
}
