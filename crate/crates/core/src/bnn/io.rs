//! `bnn-model-v1` documents: a JSON file holding everything needed to
//! reproduce predictions (network, target scaling, standardizer, feature
//! settings, training configuration).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::BnnModel;
use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, Standardizer};

pub const MODEL_FORMAT: &str = "bnn-model-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    pub hidden_dims: Vec<usize>,
    pub prediction_cycle: u32,
    pub model: BnnModel,
    pub standardizer: Standardizer,
    pub feature_config: FeatureConfig,
    pub train_config: TrainConfig,
}

impl ModelDocument {
    pub fn new(
        model: BnnModel,
        standardizer: Standardizer,
        feature_config: FeatureConfig,
        train_config: TrainConfig,
        prediction_cycle: u32,
    ) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            hidden_dims: model.hidden_dims(),
            prediction_cycle,
            model,
            standardizer,
            feature_config,
            train_config,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::ModelFormat(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument =
            serde_json::from_str(text).map_err(|e| Error::ModelFormat(e.to_string()))?;
        if doc.format != MODEL_FORMAT {
            return Err(Error::ModelFormat(format!(
                "unsupported format `{}`, expected `{MODEL_FORMAT}`",
                doc.format
            )));
        }
        doc.model.validate()?;
        if doc.model.hidden_dims() != doc.hidden_dims {
            return Err(Error::ModelFormat(
                "hidden_dims do not match the stored layers".into(),
            ));
        }
        Ok(doc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
