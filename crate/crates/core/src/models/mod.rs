//! The sentence classifiers: CNN, bidirectional LSTM/GRU and CRNN.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Architecture, ModelConfig};
pub use model::{Model, Output, Param};
