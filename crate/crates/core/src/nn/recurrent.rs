use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    /// Number of stacked gate blocks in the input projection.
    pub fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            other => Err(Error::Config(format!("unknown cell kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Graph handles for one recurrent cell.
///
/// LSTM: `w_ih [4H, in]`, `w_hh [4H, H]`, `bias [4H]` with gate blocks in
/// the order input, forget, candidate, output.
///
/// GRU: `w_ih [3H, in]` (update, reset, candidate), `w_hh [2H, H]` (update,
/// reset), `w_hn [H, H]` applied to `r ⊙ h`, `bias [3H]`.
#[derive(Debug, Clone, Copy)]
pub struct RecurrentCell {
    pub kind: CellKind,
    pub input_size: usize,
    pub hidden_size: usize,
    pub w_ih: Var,
    pub w_hh: Var,
    pub w_hn: Option<Var>,
    pub bias: Var,
}

impl RecurrentCell {
    pub fn lstm<T: Real>(g: &Graph<'_, T>, w_ih: Var, w_hh: Var, bias: Var) -> Result<Self> {
        Self::checked(g, CellKind::Lstm, w_ih, w_hh, None, bias)
    }

    pub fn gru<T: Real>(
        g: &Graph<'_, T>,
        w_ih: Var,
        w_hh: Var,
        w_hn: Var,
        bias: Var,
    ) -> Result<Self> {
        Self::checked(g, CellKind::Gru, w_ih, w_hh, Some(w_hn), bias)
    }

    fn checked<T: Real>(
        g: &Graph<'_, T>,
        kind: CellKind,
        w_ih: Var,
        w_hh: Var,
        w_hn: Option<Var>,
        bias: Var,
    ) -> Result<Self> {
        let s = g.shape(w_ih).to_vec();
        let gates = kind.gates();
        if s.len() != 2 || s[0] % gates != 0 {
            return Err(Error::dim("recurrent cell w_ih", &s, &[gates]));
        }
        let h = s[0] / gates;
        let hh_rows = match kind {
            CellKind::Lstm => 4 * h,
            CellKind::Gru => 2 * h,
        };
        if g.shape(w_hh) != [hh_rows, h] {
            return Err(Error::dim(
                "recurrent cell w_hh",
                g.shape(w_hh),
                &[hh_rows, h],
            ));
        }
        if let Some(w_hn) = w_hn {
            if g.shape(w_hn) != [h, h] {
                return Err(Error::dim("recurrent cell w_hn", g.shape(w_hn), &[h, h]));
            }
        }
        if g.shape(bias) != [gates * h] {
            return Err(Error::dim(
                "recurrent cell bias",
                g.shape(bias),
                &[gates * h],
            ));
        }
        Ok(RecurrentCell {
            kind,
            input_size: s[1],
            hidden_size: h,
            w_ih,
            w_hh,
            w_hn,
            bias,
        })
    }

    fn check_state<T: Real>(&self, g: &Graph<'_, T>, state: Var) -> Result<()> {
        if g.shape(state) != [self.hidden_size] {
            return Err(Error::dim(
                "recurrent state",
                g.shape(state),
                &[self.hidden_size],
            ));
        }
        Ok(())
    }

    fn project<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        g.linear(x, self.w_ih, Some(self.bias))
    }

    fn w_hn(&self) -> Result<Var> {
        self.w_hn
            .ok_or_else(|| Error::Contract("GRU cell without w_hn".into()))
    }
}

/// One LSTM step: `i, f, o = σ(·)`, `g = tanh(·)`, `c' = f⊙c + i⊙g`,
/// `h' = o⊙tanh(c')`.
pub fn lstm_step<T: Real>(
    g: &mut Graph<'_, T>,
    cell: &RecurrentCell,
    x_t: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    if cell.kind != CellKind::Lstm {
        return Err(Error::Contract("lstm_step on a GRU cell".into()));
    }
    cell.check_state(g, h)?;
    cell.check_state(g, c)?;
    let xp = cell.project(g, x_t)?;
    let xp = g.reshape(xp, vec![1, 4 * cell.hidden_size])?;
    let out = g.lstm_sequence(xp, cell.w_hh, h, c, &[1], false)?;
    let out = g.row(out, 0)?;
    let hs = cell.hidden_size;
    Ok((g.slice(out, 0, 0, hs)?, g.slice(out, 0, hs, hs)?))
}

/// One GRU step: `z, r = σ(·)`, `h̃ = tanh(W x + U(r⊙h) + b)`,
/// `h' = (1−z)⊙h + z⊙h̃`.
pub fn gru_step<T: Real>(
    g: &mut Graph<'_, T>,
    cell: &RecurrentCell,
    x_t: Var,
    h: Var,
) -> Result<Var> {
    if cell.kind != CellKind::Gru {
        return Err(Error::Contract("gru_step on an LSTM cell".into()));
    }
    cell.check_state(g, h)?;
    let xp = cell.project(g, x_t)?;
    let xp = g.reshape(xp, vec![1, 3 * cell.hidden_size])?;
    let out = g.gru_sequence(xp, cell.w_hh, cell.w_hn()?, h, &[1], false)?;
    g.row(out, 0)
}

/// Runs `cell` over the first `valid_length` rows of `xs` (`[L, in]`) from
/// zero initial state. Returns `[L, H]`; rows at or beyond `valid_length`
/// are zero. The backward direction visits `valid_length − 1, …, 0` and
/// stores each state at its own position.
pub fn run_rnn<T: Real>(
    g: &mut Graph<'_, T>,
    cell: &RecurrentCell,
    xs: Var,
    direction: Direction,
    valid_length: usize,
) -> Result<Var> {
    let s = g.shape(xs).to_vec();
    if s.len() != 2 || s[1] != cell.input_size {
        return Err(Error::dim("run_rnn", &s, &[cell.input_size]));
    }
    if valid_length == 0 {
        return Err(Error::EmptySequence("recurrence over zero valid positions"));
    }
    let len = s[0];
    if valid_length > len {
        return Err(Error::Contract(format!(
            "valid length {valid_length} exceeds {len} rows"
        )));
    }
    let prefix = if valid_length < len {
        g.slice(xs, 0, 0, valid_length)?
    } else {
        xs
    };
    let projected = cell.project(g, prefix)?;

    let states = recur(g, cell, projected, &[valid_length], direction)?;
    let hs = cell.hidden_size;
    if valid_length < len {
        let pad = g.zeros(vec![len - valid_length, hs]);
        g.concat(&[states, pad], 0)
    } else {
        Ok(states)
    }
}

// Recurrence over projected rows of several packed sentences from zero state.
fn recur<T: Real>(
    g: &mut Graph<'_, T>,
    cell: &RecurrentCell,
    projected: Var,
    lengths: &[usize],
    direction: Direction,
) -> Result<Var> {
    let hs = cell.hidden_size;
    let reverse = direction == Direction::Backward;
    let h0 = g.zeros(vec![lengths.len(), hs]);
    match cell.kind {
        CellKind::Lstm => {
            let c0 = g.zeros(vec![lengths.len(), hs]);
            let out = g.lstm_sequence(projected, cell.w_hh, h0, c0, lengths, reverse)?;
            g.slice(out, 1, 0, hs)
        }
        CellKind::Gru => g.gru_sequence(projected, cell.w_hh, cell.w_hn()?, h0, lengths, reverse),
    }
}

/// Runs `cell` over several sentences at once. `xs` (`[N, in]`) holds their
/// rows back to back, `lengths` how many rows belong to each; every sentence
/// starts from zero state. Returns `[N, H]`, and each sentence's rows equal
/// what [`run_rnn`] gives for that sentence alone, bit for bit.
pub fn run_rnn_packed<T: Real>(
    g: &mut Graph<'_, T>,
    cell: &RecurrentCell,
    xs: Var,
    lengths: &[usize],
    direction: Direction,
) -> Result<Var> {
    let s = g.shape(xs).to_vec();
    if s.len() != 2 || s[1] != cell.input_size {
        return Err(Error::dim("run_rnn_packed", &s, &[cell.input_size]));
    }
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::EmptySequence("recurrence over zero valid positions"));
    }
    let total: usize = lengths.iter().sum();
    if total != s[0] {
        return Err(Error::Contract(format!(
            "lengths sum to {total}, input has {} rows",
            s[0]
        )));
    }
    let projected = cell.project(g, xs)?;
    recur(g, cell, projected, lengths, direction)
}

/// `[h_forward ; h_backward]` per position, `[L, 2H]`.
pub fn bidirectional<T: Real>(
    g: &mut Graph<'_, T>,
    forward: &RecurrentCell,
    backward: &RecurrentCell,
    xs: Var,
    valid_length: usize,
) -> Result<Var> {
    if forward.hidden_size != backward.hidden_size {
        return Err(Error::dim(
            "bidirectional hidden sizes",
            &[forward.hidden_size],
            &[backward.hidden_size],
        ));
    }
    let f = run_rnn(g, forward, xs, Direction::Forward, valid_length)?;
    let b = run_rnn(g, backward, xs, Direction::Backward, valid_length)?;
    g.concat(&[f, b], 1)
}

/// Packed form of [`bidirectional`]: `[N, 2H]` over sentences laid out as in
/// [`run_rnn_packed`].
pub fn bidirectional_packed<T: Real>(
    g: &mut Graph<'_, T>,
    forward: &RecurrentCell,
    backward: &RecurrentCell,
    xs: Var,
    lengths: &[usize],
) -> Result<Var> {
    if forward.hidden_size != backward.hidden_size {
        return Err(Error::dim(
            "bidirectional hidden sizes",
            &[forward.hidden_size],
            &[backward.hidden_size],
        ));
    }
    let f = run_rnn_packed(g, forward, xs, lengths, Direction::Forward)?;
    let b = run_rnn_packed(g, backward, xs, lengths, Direction::Backward)?;
    g.concat(&[f, b], 1)
}
