mod corpus;
mod folds;
mod metrics;
pub mod synthetic;
mod tokenize;
mod vocab;

pub use corpus::{Example, LabeledCorpus, LITERAL, METAPHOR};
pub use folds::{kfold, stratified_kfold, FoldPlan};
pub use metrics::{compute_metrics, Metrics};
pub use tokenize::{tokenize, tokenize_with, TokenizerOptions};
pub use vocab::{decode, encode, Encoded, Vocab, PAD, PAD_TOKEN, UNK, UNK_TOKEN};
