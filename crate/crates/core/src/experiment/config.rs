use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::TokenizerOptions;
use crate::error::{Error, Result};
use crate::models::{Architecture, ModelConfig};
use crate::nn::CellKind;
use crate::optim::AdamConfig;
use crate::tensor::{PoolMode, Precision};

/// Every knob of a run, as one flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    /// `.vec` file for `train` / `crossval`.
    pub embeddings: Option<PathBuf>,
    /// `.vec` path template for `sweep`; `{D}` is replaced by the dimension.
    pub embeddings_pattern: Option<String>,
    /// Report (crossval, sweep) or checkpoint (train) path.
    pub output: Option<PathBuf>,
    /// Held-out corpus scored after `train`.
    pub eval_corpus: Option<PathBuf>,

    pub architecture: Architecture,
    pub embedding_dim: usize,
    pub kernel_heights: Vec<usize>,
    pub out_channels: usize,
    pub hidden_size: usize,
    pub fc_units: usize,
    pub dropout_p: f64,
    pub dropout_all: bool,
    pub fine_tune: bool,
    pub max_len: Option<usize>,
    pub bidirectional: bool,
    pub pooling: PoolMode,
    pub crnn_cell: CellKind,
    pub seed: u64,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,

    pub folds: usize,
    pub stratified: bool,
    pub min_count: usize,
    pub lowercase: bool,
    pub fold_final_sigma: bool,
    pub workers: usize,
    pub precision: Precision,
    /// Fill the `seconds` report column. Off by default so that reports
    /// of repeated runs are byte-identical.
    pub timing: bool,

    pub sweep_dims: Vec<usize>,
    pub sweep_models: Vec<Architecture>,
    pub sweep_fine_tune: Vec<bool>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let a = AdamConfig::default();
        RunConfig {
            corpus: None,
            embeddings: None,
            embeddings_pattern: None,
            output: None,
            eval_corpus: None,
            architecture: m.architecture,
            embedding_dim: m.embedding_dim,
            kernel_heights: m.kernel_heights,
            out_channels: m.out_channels,
            hidden_size: m.hidden_size,
            fc_units: m.fc_units,
            dropout_p: m.dropout_p,
            dropout_all: m.dropout_all,
            fine_tune: m.fine_tune,
            max_len: m.max_len,
            bidirectional: m.bidirectional,
            pooling: m.pooling,
            crnn_cell: m.crnn_cell,
            seed: m.seed,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            clip_norm: a.clip_norm,
            batch_size: 32,
            epochs: 20,
            folds: 10,
            stratified: true,
            min_count: 1,
            lowercase: true,
            fold_final_sigma: false,
            workers: 1,
            precision: Precision::F64,
            timing: false,
            sweep_dims: (1..=10).map(|i| 50 * i).collect(),
            sweep_models: Architecture::ALL.to_vec(),
            sweep_fine_tune: vec![true, false],
        }
    }
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            architecture: self.architecture,
            embedding_dim: self.embedding_dim,
            kernel_heights: self.kernel_heights.clone(),
            out_channels: self.out_channels,
            hidden_size: self.hidden_size,
            fc_units: self.fc_units,
            dropout_p: self.dropout_p,
            dropout_all: self.dropout_all,
            fine_tune: self.fine_tune,
            max_len: self.max_len,
            bidirectional: self.bidirectional,
            pooling: self.pooling,
            crnn_cell: self.crnn_cell,
            seed: self.seed,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip_norm: self.clip_norm,
        }
    }

    pub fn tokenizer(&self) -> TokenizerOptions {
        TokenizerOptions {
            lowercase: self.lowercase,
            fold_final_sigma: self.fold_final_sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.adam().validate().map_err(|e| Error::Config(e.to_string()))?;
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.folds < 2 {
            return fail("folds must be at least 2");
        }
        if self.min_count == 0 {
            return fail("min_count must be at least 1");
        }
        if self.workers == 0 {
            return fail("workers must be at least 1");
        }
        if self.sweep_dims.contains(&0) {
            return fail("sweep_dims must be positive");
        }
        if let Some(p) = &self.embeddings_pattern {
            if !p.contains("{D}") {
                return fail("embeddings_pattern must contain `{D}`");
            }
        }
        Ok(())
    }

    /// Reads an optional JSON file, then applies `--key value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str::<Value>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Map::new()),
        };
        let Value::Object(map) = &mut doc else {
            return Err(Error::Config("configuration must be a JSON object".into()));
        };
        let defaults = serde_json::to_value(RunConfig::default())?;
        for (key, raw) in overrides {
            let key = key.replace('-', "_");
            let Some(default) = defaults.get(&key) else {
                return Err(Error::Config(format!("unknown option `{key}`")));
            };
            map.insert(key, override_value(default, raw));
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Keys accepted in the file and as flags.
    pub fn keys() -> Vec<String> {
        match serde_json::to_value(RunConfig::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }
}

// Reads a flag value as JSON when it parses, as a comma list for list
// options, and as a string otherwise.
fn override_value(default: &Value, raw: &str) -> Value {
    if default.is_array() && !raw.trim_start().starts_with('[') {
        let items = raw.split(',').filter(|s| !s.trim().is_empty()).map(|s| scalar(s.trim())).collect();
        return Value::Array(items);
    }
    scalar(raw)
}

fn scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"architecture":"bilstm","epochs":3,"lr":0.01}"#).unwrap();
        let cfg = RunConfig::load(
            Some(&path),
            &ov(&[
                ("epochs", "5"),
                ("kernel-heights", "2,3"),
                ("corpus", "data/x.tsv"),
                ("fine_tune", "false"),
                ("max_len", "40"),
                ("clip_norm", "null"),
                ("sweep_models", "cnn,crnn"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.architecture, Architecture::BiLstm);
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.kernel_heights, vec![2, 3]);
        assert_eq!(cfg.corpus.as_deref(), Some(Path::new("data/x.tsv")));
        assert!(!cfg.fine_tune);
        assert_eq!(cfg.max_len, Some(40));
        assert_eq!(cfg.sweep_models, vec![Architecture::Cnn, Architecture::Crnn]);
    }

    #[test]
    fn every_model_key_is_a_run_key() {
        let keys = RunConfig::keys();
        let model = serde_json::to_value(ModelConfig::default()).unwrap();
        for k in model.as_object().unwrap().keys() {
            assert!(keys.contains(k), "{k}");
        }
        let adam = serde_json::to_value(AdamConfig::default()).unwrap();
        for k in adam.as_object().unwrap().keys() {
            assert!(keys.contains(k), "{k}");
        }
    }

    #[test]
    fn bad_configurations_are_config_errors() {
        let kind = |o: &[(&str, &str)]| RunConfig::load(None, &ov(o)).unwrap_err().kind();
        use crate::error::ErrorKind::Config;
        assert_eq!(kind(&[("epochz", "3")]), Config);
        assert_eq!(kind(&[("epochs", "many")]), Config);
        assert_eq!(kind(&[("folds", "1")]), Config);
        assert_eq!(kind(&[("lr", "0")]), Config);
        assert_eq!(kind(&[("embeddings_pattern", "v.vec")]), Config);
        assert_eq!(kind(&[("architecture", "mlp")]), Config);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{ not json").unwrap();
        assert_eq!(RunConfig::load(Some(&path), &[]).unwrap_err().kind(), Config);
    }
}
