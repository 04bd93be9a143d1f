use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::CellKind;
use crate::tensor::PoolMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    #[default]
    Cnn,
    BiLstm,
    BiGru,
    Crnn,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::Cnn,
        Architecture::BiLstm,
        Architecture::BiGru,
        Architecture::Crnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Cnn => "cnn",
            Architecture::BiLstm => "bilstm",
            Architecture::BiGru => "bigru",
            Architecture::Crnn => "crnn",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "cnn" => Ok(Architecture::Cnn),
            "bilstm" | "blstm" | "lstm" => Ok(Architecture::BiLstm),
            "bigru" | "bgru" | "gru" => Ok(Architecture::BiGru),
            "crnn" | "rcnn" => Ok(Architecture::Crnn),
            _ => Err(Error::Config(format!("unknown architecture `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub embedding_dim: usize,
    pub kernel_heights: Vec<usize>,
    pub out_channels: usize,
    pub hidden_size: usize,
    pub fc_units: usize,
    pub dropout_p: f64,
    /// Apply dropout to the pooled vector of the recurrent models too, not
    /// only the CNN.
    pub dropout_all: bool,
    pub fine_tune: bool,
    /// `None` means the longest sentence of the training corpus.
    pub max_len: Option<usize>,
    pub bidirectional: bool,
    pub pooling: PoolMode,
    /// Recurrent cell used inside the CRNN.
    pub crnn_cell: CellKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::Cnn,
            embedding_dim: 50,
            kernel_heights: vec![3, 4, 5],
            out_channels: 32,
            hidden_size: 100,
            fc_units: 100,
            dropout_p: 0.5,
            dropout_all: true,
            fine_tune: true,
            max_len: None,
            bidirectional: true,
            pooling: PoolMode::Max,
            crnn_cell: CellKind::Gru,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.embedding_dim == 0 {
            return fail("embedding_dim must be positive".into());
        }
        if self.architecture == Architecture::Cnn {
            if self.kernel_heights.is_empty() || self.kernel_heights.contains(&0) {
                return fail(format!("bad kernel_heights {:?}", self.kernel_heights));
            }
            if self.out_channels == 0 {
                return fail("out_channels must be positive".into());
            }
        } else if self.hidden_size == 0 {
            return fail("hidden_size must be positive".into());
        }
        if self.fc_units == 0 {
            return fail("fc_units must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        match self.max_len {
            Some(0) => return fail("max_len must be positive".into()),
            Some(m) if self.architecture == Architecture::Cnn && m < self.min_length() => {
                return fail(format!("max_len {m} is below the widest kernel {}", self.min_length()))
            }
            _ => {}
        }
        Ok(())
    }

    /// Shortest row count a sentence is padded up to before the network.
    pub fn min_length(&self) -> usize {
        match self.architecture {
            Architecture::Cnn => self.kernel_heights.iter().copied().max().unwrap_or(1),
            _ => 1,
        }
    }

    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    pub fn cell(&self) -> CellKind {
        match self.architecture {
            Architecture::BiGru => CellKind::Gru,
            Architecture::Crnn => self.crnn_cell,
            _ => CellKind::Lstm,
        }
    }

    pub fn uses_dropout(&self) -> bool {
        self.dropout_p > 0.0 && (self.dropout_all || self.architecture == Architecture::Cnn)
    }

    /// Closed-form count of the parameters the optimizer updates.
    pub fn trainable_parameters(&self, vocab_size: usize) -> usize {
        let d = self.embedding_dim;
        let embedding = if self.fine_tune { vocab_size * d } else { 0 };
        let body = match self.architecture {
            Architecture::Cnn => {
                let c = self.out_channels;
                let convs: usize = self.kernel_heights.iter().map(|k| k * d * c + c).sum();
                convs + self.kernel_heights.len() * c + 1
            }
            arch => {
                let (h, f, dirs) = (self.hidden_size, self.fc_units, self.directions());
                let cells = dirs * self.cell().gates() * h * (d + h + 1);
                let width = if arch == Architecture::Crnn { dirs * h + d } else { dirs * h };
                cells + width * f + f + f + 1
            }
        };
        embedding + body
    }
}
