use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{ModelParams, NamedArray};
use crate::data::PipelineSnapshot;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "msad-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON container for a trained detector.
///
/// Values are written with shortest round-trip formatting, so a
/// save/load cycle reproduces every `f64` bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub params: Vec<NamedArray>,
    /// Preprocessing needed to score new data consistently.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<PipelineSnapshot>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, pipeline: Option<PipelineSnapshot>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: params.config().clone(),
            params: params.to_arrays(),
            pipeline,
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        ModelParams::from_arrays(&self.model, self.params.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "not a checkpoint: format `{}`",
                ckpt.format
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_is_bitwise() {
        let cfg = ModelConfig {
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        Checkpoint::new(&params, None).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().params().unwrap();
        let (a, b) = (params.flat_values(), back.flat_values());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(params, back);
    }

    #[test]
    fn rejects_foreign_documents() {
        let params = ModelParams::init(&ModelConfig::default(), 0).unwrap();
        let mut c = Checkpoint::new(&params, None);
        c.version = 99;
        assert!(Checkpoint::from_json(&c.to_json().unwrap()).is_err());
        assert!(Checkpoint::from_json("{}").is_err());
    }
}
