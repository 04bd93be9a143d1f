use rand::Rng;

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

/// Inverted dropout: in training, each unit is zeroed with probability `p`
/// and survivors are scaled by `1/(1−p)`. Identity in evaluation mode.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<'_, T>,
    x: Var,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - p));
    let mask = (0..g.value(x).len())
        .map(|_| {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    g.masked(x, mask)
}
