//! Layers used by the sentence classifiers, expressed as graph builders.
//!
//! Layers do not own parameters: callers bind parameter tensors into a
//! [`Graph`](crate::tensor::Graph) and pass the resulting handles in.

mod conv;
mod dropout;
pub mod init;
mod recurrent;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Graph, PoolMode, Real, Var};

pub use conv::{conv1d_valid, conv1d_valid_linear, ConvBank};
pub use dropout::dropout;
pub use recurrent::{
    bidirectional, bidirectional_packed, gru_step, lstm_step, run_rnn, run_rnn_packed, CellKind,
    Direction, RecurrentCell,
};

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Looks up rows of an embedding `table` (`[|V|, D]`). Rows equal to
/// `pad_index` are returned as stored but never receive gradient.
pub fn embed<T: Real>(
    g: &mut Graph<'_, T>,
    table: Var,
    ids: &[usize],
    pad_index: usize,
) -> Result<Var> {
    g.gather(table, ids, Some(pad_index))
}

/// Max or mean over the first `valid_length` rows of `[T, C]`.
pub fn pool_time<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    mode: PoolMode,
    valid_length: usize,
) -> Result<Var> {
    g.pool(x, mode, valid_length)
}

/// `W x + b` with `W` of shape `[out, in]`.
pub fn linear<T: Real>(g: &mut Graph<'_, T>, w: Var, b: Var, x: Var) -> Result<Var> {
    g.linear(x, w, Some(b))
}

/// Binary negative log likelihood of `label` (0 = literal, 1 = metaphor)
/// under `sigmoid(logit)`, evaluated in the overflow-free logit form.
pub fn bce_loss<T: Real>(g: &mut Graph<'_, T>, logit: Var, label: u8) -> Result<Var> {
    g.bce_with_logits(logit, if label == 0 { T::zero() } else { T::one() })
}
