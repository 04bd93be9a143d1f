use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::{Model, Param};
use crate::data::{TokenizerOptions, Vocab};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Real, Tensor};

const FORMAT: &str = "metaphor-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Everything needed to rebuild a trained model and feed it text the way
/// it was trained. Values are written as shortest round-trip decimals, so
/// a reload is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub precision: Precision,
    pub config: ModelConfig,
    pub tokenizer: TokenizerOptions,
    pub vocab: Vocab,
    pub params: Vec<StoredParam>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &Model<T>, tokenizer: TokenizerOptions) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            precision: T::PRECISION,
            config: model.config().clone(),
            tokenizer,
            vocab: model.vocab().clone(),
            params: model
                .params()
                .iter()
                .map(|p| StoredParam {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        }
    }

    pub fn into_model<T: Real>(self) -> Result<Model<T>> {
        if self.precision != T::PRECISION {
            return Err(Error::Compatibility(format!(
                "checkpoint stores {:?} parameters, {:?} requested",
                self.precision,
                T::PRECISION
            )));
        }
        let params = self
            .params
            .into_iter()
            .map(|p| {
                let values = p.values.into_iter().map(T::lit).collect();
                let value = Tensor::new(p.shape, values).map_err(|e| Error::Compatibility(format!("parameter `{}`: {e}", p.name)))?;
                Ok(Param { name: p.name, value })
            })
            .collect::<Result<Vec<_>>>()?;
        Model::with_params(self.config, self.vocab, params)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Compatibility(format!("{}: {e}", path.display())))?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::Compatibility(format!(
                "{}: unsupported checkpoint `{}` version {}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, tokenizer: TokenizerOptions, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_model(model, tokenizer).write(path)
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<(Model<T>, TokenizerOptions)> {
    let ck = Checkpoint::read(path)?;
    let tokenizer = ck.tokenizer;
    Ok((ck.into_model()?, tokenizer))
}
