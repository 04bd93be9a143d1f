use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

/// Handles to one bank of 1-D convolutions over token windows. Each kernel
/// of height `k` has a weight of shape `[k, D, C]` and a bias of shape `[C]`.
#[derive(Debug, Clone)]
pub struct ConvBank {
    pub kernel_heights: Vec<usize>,
    pub out_channels: usize,
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl ConvBank {
    /// ReLU feature map of the kernel at position `index`, `[L − k + 1, C]`.
    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, index: usize) -> Result<Var> {
        conv1d_valid(g, x, self.weights[index], self.biases[index])
    }
}

/// Valid convolution without the nonlinearity: output row `t`, channel `c`
/// is `bias[c] + Σ_{i<k, d<D} weight[i, d, c] · x[t + i, d]`.
pub fn conv1d_valid_linear<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let ws = g.shape(weight).to_vec();
    let xs = g.shape(x).to_vec();
    if ws.len() != 3 || xs.len() != 2 || ws[1] != xs[1] {
        return Err(Error::dim("conv1d_valid", &xs, &ws));
    }
    let (k, d, c) = (ws[0], ws[1], ws[2]);
    let windows = g.unfold(x, k)?;
    let kernel = g.reshape(weight, vec![k * d, c])?;
    let pre = g.matmul(windows, kernel)?;
    g.add_row_bias(pre, bias)
}

/// Valid convolution followed by ReLU.
pub fn conv1d_valid<T: Real>(g: &mut Graph<'_, T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let pre = conv1d_valid_linear(g, x, weight, bias)?;
    Ok(g.relu(pre))
}
