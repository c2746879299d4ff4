use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::ModelParams;
use crate::error::{Error, Result};
use crate::features::{Normalizer, SchemaEntry};
use crate::losses::TemperatureState;

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Everything needed to score new data with a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelParams,
    pub normalizer: Option<Normalizer>,
    pub feature_schema: Vec<SchemaEntry>,
    pub temperature: Option<TemperatureState>,
}

impl Checkpoint {
    pub fn new(model: ModelParams, normalizer: Option<Normalizer>, temperature: Option<TemperatureState>) -> Self {
        let feature_schema = crate::features::feature_schema(normalizer.as_ref());
        Checkpoint {
            format_version: CHECKPOINT_FORMAT,
            model,
            normalizer,
            feature_schema,
            temperature,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        if !self.model.all_finite() {
            return Err(Error::numeric("checkpoint", "refusing to save non-finite parameters"));
        }
        serde_json::to_string(self).map_err(|e| Error::data(format!("checkpoint serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::data(format!("checkpoint parse: {e}")))?;
        if ck.format_version != CHECKPOINT_FORMAT {
            return Err(Error::data(format!(
                "unsupported checkpoint format {} (expected {CHECKPOINT_FORMAT})",
                ck.format_version
            )));
        }
        ck.model.config.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Data(m) => Error::parse(path, m),
            other => other,
        })
    }
}
