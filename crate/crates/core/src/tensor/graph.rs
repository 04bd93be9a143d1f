use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::kernels::{
    activate, add_assign, axpy, dot, gemm_nt, linear_forward, matmul, outer_accumulate, sigmoid,
    transpose, Activation,
};
use super::sequence::{self, GruCache, GruGrads, LstmCache, LstmGrads, Packing};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Max,
    Avg,
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" => Ok(PoolMode::Max),
            "avg" | "mean" => Ok(PoolMode::Avg),
            other => Err(Error::Config(format!("unknown pooling mode `{other}`"))),
        }
    }
}

/// Operation tag of a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Linear,
    Add,
    Sub,
    Mul,
    Scale,
    Tanh,
    Sigmoid,
    Relu,
    Concat,
    Slice,
    Reshape,
    Stack,
    Sum,
    Gather,
    Unfold,
    AddRowBias,
    Pool,
    Dropout,
    BceLogits,
    Interpolate,
    Lstm,
    Gru,
    Shift,
}

impl OpKind {
    pub const ALL: [OpKind; 25] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Linear,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Reshape,
        OpKind::Stack,
        OpKind::Sum,
        OpKind::Gather,
        OpKind::Unfold,
        OpKind::AddRowBias,
        OpKind::Pool,
        OpKind::Dropout,
        OpKind::BceLogits,
        OpKind::Interpolate,
        OpKind::Lstm,
        OpKind::Gru,
        OpKind::Shift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Linear => "linear",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::Stack => "stack",
            OpKind::Sum => "sum",
            OpKind::Gather => "gather",
            OpKind::Unfold => "unfold",
            OpKind::AddRowBias => "add_row_bias",
            OpKind::Pool => "pool",
            OpKind::Dropout => "dropout",
            OpKind::BceLogits => "bce_logits",
            OpKind::Interpolate => "interpolate",
            OpKind::Lstm => "lstm",
            OpKind::Gru => "gru",
            OpKind::Shift => "shift",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown op `{s}`")))
    }
}

/// A deliberately broken backward rule, used to prove the gradient checker
/// catches mistakes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flip the sign of every gradient flowing out of nodes of this kind.
    NegateBackward(OpKind),
}

enum Value<'a, T> {
    Owned(Vec<T>),
    Borrowed(&'a [T]),
}

impl<T> Value<'_, T> {
    fn as_slice(&self) -> &[T] {
        match self {
            Value::Owned(v) => v,
            Value::Borrowed(s) => s,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Stack(Vec<Var>),
    Sum(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
        pad: Option<usize>,
    },
    Unfold {
        input: Var,
        window: usize,
        lengths: Vec<usize>,
    },
    AddRowBias {
        x: Var,
        bias: Var,
    },
    Pool {
        input: Var,
        mode: PoolMode,
        /// (first row, row count) per pooled output row
        segments: Vec<(usize, usize)>,
        /// absolute winning row per output element (max mode)
        argmax: Vec<usize>,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    BceLogits {
        logits: Var,
        labels: Vec<T>,
    },
    Interpolate {
        gate: Var,
        from: Var,
        to: Var,
    },
    Lstm {
        xp: Var,
        w_hh: Var,
        h0: Var,
        c0: Var,
        hidden: usize,
        cache: LstmCache<T>,
    },
    Shift {
        input: Var,
        lengths: Vec<usize>,
        delta: isize,
    },
    Gru {
        xp: Var,
        w_hh: Var,
        w_hn: Var,
        h0: Var,
        hidden: usize,
        cache: GruCache<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Stack(_) => OpKind::Stack,
            Op::Sum(_) => OpKind::Sum,
            Op::Gather { .. } => OpKind::Gather,
            Op::Unfold { .. } => OpKind::Unfold,
            Op::AddRowBias { .. } => OpKind::AddRowBias,
            Op::Pool { .. } => OpKind::Pool,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::BceLogits { .. } => OpKind::BceLogits,
            Op::Interpolate { .. } => OpKind::Interpolate,
            Op::Lstm { .. } => OpKind::Lstm,
            Op::Gru { .. } => OpKind::Gru,
            Op::Shift { .. } => OpKind::Shift,
        }
    }
}

struct Node<'a, T> {
    shape: Vec<usize>,
    value: Value<'a, T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradient of one leaf: a dense part plus row contributions from gathers.
#[derive(Debug, Clone)]
pub struct LeafGrad<T> {
    len: usize,
    row_width: usize,
    dense: Option<Vec<T>>,
    rows: Vec<(usize, Vec<T>)>,
}

impl<T: Real> LeafGrad<T> {
    fn new(len: usize) -> Self {
        LeafGrad {
            len,
            row_width: 0,
            dense: None,
            rows: Vec::new(),
        }
    }

    /// Adds this gradient into `target`.
    pub fn add_to(&self, target: &mut [T]) {
        assert_eq!(target.len(), self.len);
        if let Some(d) = &self.dense {
            add_assign(target, d);
        }
        for (r, g) in &self.rows {
            let w = self.row_width;
            add_assign(&mut target[r * w..(r + 1) * w], g);
        }
    }

    pub fn to_dense(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.len];
        self.add_to(&mut out);
        out
    }

    /// Row indices touched through gathers.
    pub fn touched_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.iter().map(|(r, _)| *r)
    }
}

/// Gradients of every leaf reachable from a loss.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: BTreeMap<Var, LeafGrad<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&LeafGrad<T>> {
        self.leaves.get(&var)
    }

    /// Dense gradient for `var`, or `None` when it was unreachable.
    pub fn dense(&self, var: Var) -> Option<Vec<T>> {
        self.leaves.get(&var).map(LeafGrad::to_dense)
    }

    /// Adds the gradient of `var` into the gradient buffer of `tensor`.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor<T>) -> Result<()> {
        if let Some(g) = self.leaves.get(&var) {
            if g.len != tensor.numel() {
                return Err(Error::dim("accumulate", &[g.len], tensor.shape()));
            }
            g.add_to(tensor.grad_mut());
        }
        Ok(())
    }
}

/// Tape of one forward pass.
pub struct Graph<'a, T: Real = f64> {
    nodes: Vec<Node<'a, T>>,
    fault: Option<Fault>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_or_scalar(a: &[usize], b: &[usize]) -> bool {
    a == b || numel(b) == 1
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            fault: None,
        }
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that borrows the tensor's storage. Gradients are
    /// produced for it iff the tensor requires them.
    pub fn leaf(&mut self, tensor: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: Value::Borrowed(tensor.data()),
            op: Op::Leaf,
            requires_grad: tensor.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an owned leaf.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Owned(tensor.into_data()),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Owned(tensor.into_data()),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn zeros(&mut self, shape: impl Into<Vec<usize>>) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    pub fn value(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> T {
        let s = self.value(v);
        assert_eq!(s.len(), 1, "scalar() on shape {:?}", self.shape(v));
        s[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    /// Row indices chosen by a max-pool node (first maximum per channel).
    pub fn pool_argmax(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::Pool {
                mode: PoolMode::Max,
                argmax,
                ..
            } => Some(argmax),
            _ => None,
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul(self.value(a), self.value(b), m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// `x · wᵀ + b` for `x` of shape `[in]` or `[rows, in]` and `w` of
    /// shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.is_empty() || sx.len() > 2 || *sx.last().unwrap() != sw[1] {
            return Err(Error::dim("linear", &sx, &sw));
        }
        let (out, inp) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::dim("linear bias", self.shape(b), &[out]));
            }
        }
        let rows = if sx.len() == 2 { sx[0] } else { 1 };
        let y = linear_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            rows,
            inp,
            out,
        );
        let shape = if sx.len() == 2 {
            vec![rows, out]
        } else {
            vec![out]
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            shape,
            y,
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            },
            &inputs,
        ))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Vec<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !same_or_scalar(sa, sb) {
            return Err(Error::dim(name, sa, sb));
        }
        let (va, vb) = (self.value(a), self.value(b));
        Ok(if vb.len() == va.len() {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let s = vb[0];
            va.iter().map(|&x| f(x, s)).collect()
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, factor), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = vec![T::zero(); self.value(a).len()];
        activate(Activation::Tanh, self.value(a), &mut out);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut out = vec![T::zero(); self.value(a).len()];
        activate(Activation::Sigmoid, self.value(a), &mut out);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Relu(a), &[a])
    }

    /// `(1 − gate) ⊙ from + gate ⊙ to`
    pub fn interpolate(&mut self, gate: Var, from: Var, to: Var) -> Result<Var> {
        let sg = self.shape(gate);
        if sg != self.shape(from) || sg != self.shape(to) {
            return Err(Error::dim("interpolate", sg, self.shape(to)));
        }
        let (z, a, b) = (self.value(gate), self.value(from), self.value(to));
        let out = z
            .iter()
            .zip(a.iter().zip(b))
            .map(|(&z, (&a, &b))| (T::one() - z) * a + z * b)
            .collect();
        let shape = sg.to_vec();
        Ok(self.push(
            shape,
            out,
            Op::Interpolate { gate, from, to },
            &[gate, from, to],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(T::zero(), |acc, &x| acc + x);
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    // ---- structure ------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        if inputs.len() == 1 {
            return Ok(first);
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::Contract(format!(
                "slice [{start}, {}) on axis {axis} of shape {s:?}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(input);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Slice { input, axis, start }, &[input]))
    }

    /// Row `r` of a 2-D node as a 1-D node.
    pub fn row(&mut self, input: Var, r: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("row", &s, &[r]));
        }
        let v = self.slice(input, 0, r, 1)?;
        self.reshape(v, vec![s[1]])
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(input)) || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("reshape", self.shape(input), &shape));
        }
        let out = self.value(input).to_vec();
        Ok(self.push(shape, out, Op::Reshape(input), &[input]))
    }

    /// Stacks equally sized 1-D nodes into the rows of a 2-D node.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows
            .first()
            .ok_or_else(|| Error::Contract("stack of zero rows".into()))?;
        let width = self.shape(first).to_vec();
        if width.len() != 1 {
            return Err(Error::dim("stack", &width, &[1]));
        }
        let mut out = Vec::with_capacity(rows.len() * width[0]);
        for &r in rows {
            if self.shape(r) != width.as_slice() {
                return Err(Error::dim("stack", &width, self.shape(r)));
            }
            out.extend_from_slice(self.value(r));
        }
        Ok(self.push(
            vec![rows.len(), width[0]],
            out,
            Op::Stack(rows.to_vec()),
            rows,
        ))
    }

    /// Selects rows of a 2-D `table`. Rows equal to `pad` never receive
    /// gradient.
    pub fn gather(&mut self, table: Var, ids: &[usize], pad: Option<usize>) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("gather", &s, &[ids.len()]));
        }
        if ids.is_empty() {
            return Err(Error::EmptySequence("gather of zero ids"));
        }
        let (rows, width) = (s[0], s[1]);
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(Error::Vocabulary { id, size: rows });
            }
            out.extend_from_slice(&src[id * width..(id + 1) * width]);
        }
        Ok(self.push(
            vec![ids.len(), width],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                pad,
            },
            &[table],
        ))
    }

    /// Sliding windows of `window` rows over `[L, D]`, flattened to
    /// `[L − window + 1, window·D]`.
    pub fn unfold(&mut self, input: Var, window: usize) -> Result<Var> {
        let len = self.shape(input).first().copied().unwrap_or(0);
        self.unfold_packed(input, &[len], window)
    }

    /// [`Graph::unfold`] applied separately to consecutive row blocks of
    /// `lengths` rows each; windows never straddle two blocks.
    pub fn unfold_packed(&mut self, input: Var, lengths: &[usize], window: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 || window == 0 {
            return Err(Error::dim("unfold", &s, &[window]));
        }
        if lengths.iter().sum::<usize>() != s[0] {
            return Err(Error::dim("unfold segments", &s, lengths));
        }
        if let Some(&len) = lengths.iter().find(|&&l| l < window) {
            return Err(Error::SentenceTooShort { len, window });
        }
        let d = s[1];
        let positions: usize = lengths.iter().map(|l| l - window + 1).sum();
        let src = self.value(input);
        let mut out = Vec::with_capacity(positions * window * d);
        let mut start = 0;
        for &len in lengths {
            for t in start..start + len - window + 1 {
                out.extend_from_slice(&src[t * d..(t + window) * d]);
            }
            start += len;
        }
        let op = Op::Unfold {
            input,
            window,
            lengths: lengths.to_vec(),
        };
        Ok(self.push(vec![positions, window * d], out, op, &[input]))
    }

    /// Moves rows `delta` places later within each block of `lengths` rows
    /// (earlier for negative `delta`); rows shifted in from outside a block
    /// are zero.
    pub fn shift_packed(&mut self, input: Var, lengths: &[usize], delta: isize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 || lengths.iter().sum::<usize>() != s[0] {
            return Err(Error::dim("shift segments", &s, lengths));
        }
        let c = s[1];
        let src = self.value(input);
        let mut out = vec![T::zero(); src.len()];
        let mut start = 0;
        for &len in lengths {
            for t in 0..len {
                if let Some(from) = shifted_from(t, len, delta) {
                    let (o, i) = ((start + t) * c, (start + from) * c);
                    out[o..o + c].copy_from_slice(&src[i..i + c]);
                }
            }
            start += len;
        }
        let op = Op::Shift {
            input,
            lengths: lengths.to_vec(),
            delta,
        };
        Ok(self.push(s, out, op, &[input]))
    }

    /// Adds a `[N]` bias to every row of `[M, N]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::dim("add_row_bias", &sx, &sb));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(sx[1]) {
            add_assign(row, b);
        }
        Ok(self.push(sx, out, Op::AddRowBias { x, bias }, &[x, bias]))
    }

    /// Per-column max or mean over the first `valid` rows of `[T, C]`.
    pub fn pool(&mut self, input: Var, mode: PoolMode, valid: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("pool", &s, &[valid]));
        }
        if valid == 0 {
            return Err(Error::EmptySequence("pooling over zero valid rows"));
        }
        if valid > s[0] {
            return Err(Error::Contract(format!(
                "valid length {valid} exceeds {} rows",
                s[0]
            )));
        }
        let (out, argmax) = self.pool_rows(input, mode, &[(0, valid)]);
        let op = Op::Pool {
            input,
            mode,
            segments: vec![(0, valid)],
            argmax,
        };
        Ok(self.push(vec![s[1]], out, op, &[input]))
    }

    /// Pools each consecutive block of `lengths` rows of `[N, C]` into one
    /// row of the `[B, C]` result.
    pub fn pool_packed(&mut self, input: Var, mode: PoolMode, lengths: &[usize]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 || lengths.iter().sum::<usize>() != s[0] {
            return Err(Error::dim("pool segments", &s, lengths));
        }
        if lengths.is_empty() || lengths.contains(&0) {
            return Err(Error::EmptySequence("pooling over zero valid rows"));
        }
        let mut segments = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            segments.push((start, len));
            start += len;
        }
        let (out, argmax) = self.pool_rows(input, mode, &segments);
        let op = Op::Pool {
            input,
            mode,
            segments,
            argmax,
        };
        Ok(self.push(vec![lengths.len(), s[1]], out, op, &[input]))
    }

    fn pool_rows(
        &self,
        input: Var,
        mode: PoolMode,
        segments: &[(usize, usize)],
    ) -> (Vec<T>, Vec<usize>) {
        let c = self.shape(input)[1];
        let src = self.value(input);
        let mut out = Vec::with_capacity(segments.len() * c);
        let mut argmax = Vec::new();
        for &(start, len) in segments {
            let mut acc = src[start * c..(start + 1) * c].to_vec();
            match mode {
                PoolMode::Max => {
                    let mut best = vec![start; c];
                    for t in start + 1..start + len {
                        let row = &src[t * c..(t + 1) * c];
                        for j in 0..c {
                            if row[j] > acc[j] {
                                acc[j] = row[j];
                                best[j] = t;
                            }
                        }
                    }
                    argmax.extend(best);
                }
                PoolMode::Avg => {
                    for t in start + 1..start + len {
                        add_assign(&mut acc, &src[t * c..(t + 1) * c]);
                    }
                    let n = T::from_usize(len).unwrap();
                    acc.iter_mut().for_each(|v| *v = *v / n);
                }
            }
            out.extend(acc);
        }
        (out, argmax)
    }

    /// Multiplies by a fixed mask (already carrying the survivor scale).
    pub fn masked(&mut self, input: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(input).len() {
            return Err(Error::dim("dropout", self.shape(input), &[mask.len()]));
        }
        let out = self
            .value(input)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let shape = self.shape(input).to_vec();
        Ok(self.push(shape, out, Op::Dropout { input, mask }, &[input]))
    }

    /// Bernoulli negative log likelihood of `label` under `sigmoid(logit)`.
    pub fn bce_with_logits(&mut self, logit: Var, label: T) -> Result<Var> {
        if self.value(logit).len() != 1 {
            return Err(Error::dim("bce_with_logits", self.shape(logit), &[1]));
        }
        self.bce_mean(logit, &[label])
    }

    /// Mean Bernoulli negative log likelihood of `labels` under the sigmoid
    /// of the elements of `logits`, accumulated in element order.
    pub fn bce_mean(&mut self, logits: Var, labels: &[T]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != labels.len() || labels.is_empty() {
            return Err(Error::dim("bce_mean", self.shape(logits), &[labels.len()]));
        }
        let mut total = T::zero();
        for (&z, &y) in z.iter().zip(labels) {
            total = total + (z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p());
        }
        let loss = total / T::from_usize(labels.len()).unwrap();
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::BceLogits {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    // ---- recurrences -----------------------------------------------------

    // Validates a packed recurrence call and returns the hidden size.
    fn check_recurrence(&self, xp: Var, gates: usize, h0: Var, lengths: &[usize]) -> Result<usize> {
        if lengths.is_empty() || lengths.contains(&0) {
            return Err(Error::EmptySequence("recurrence over an empty sentence"));
        }
        let sh = self.shape(h0);
        let h = match *sh {
            [h] if lengths.len() == 1 => h,
            [b, h] if b == lengths.len() => h,
            _ => return Err(Error::dim("recurrent state", sh, &[lengths.len(), 0])),
        };
        let rows: usize = lengths.iter().sum();
        let sx = self.shape(xp);
        if sx != [rows, gates * h] {
            return Err(Error::dim(
                "recurrent input projection",
                sx,
                &[rows, gates * h],
            ));
        }
        Ok(h)
    }

    /// LSTM recurrence over pre-projected inputs `xp` (`[N, 4H]`, gate blocks
    /// i, f, g, o). The rows hold `lengths.len()` sentences back to back,
    /// each starting from its own row of `h0` / `c0` (`[B, H]`, or `[H]` for a
    /// single sentence). Returns `[N, 2H]` rows `[h_t | c_t]`.
    pub fn lstm_sequence(
        &mut self,
        xp: Var,
        w_hh: Var,
        h0: Var,
        c0: Var,
        lengths: &[usize],
        reverse: bool,
    ) -> Result<Var> {
        let h = self.check_recurrence(xp, 4, h0, lengths)?;
        if self.shape(c0) != self.shape(h0) {
            return Err(Error::dim(
                "lstm cell state",
                self.shape(c0),
                self.shape(h0),
            ));
        }
        if self.shape(w_hh) != [4 * h, h] {
            return Err(Error::dim("lstm w_hh", self.shape(w_hh), &[4 * h, h]));
        }
        let pack = Packing::new(lengths, reverse);
        let rows = pack.rows();
        let (out, cache) = sequence::lstm_forward(
            self.value(xp),
            self.value(w_hh),
            self.value(h0),
            self.value(c0),
            h,
            pack,
        );
        let op = Op::Lstm {
            xp,
            w_hh,
            h0,
            c0,
            hidden: h,
            cache,
        };
        Ok(self.push(vec![rows, 2 * h], out, op, &[xp, w_hh, h0, c0]))
    }

    /// GRU recurrence over pre-projected inputs `xp` (`[N, 3H]`, blocks z, r,
    /// n), packed as for [`Graph::lstm_sequence`]; `w_hh` is `[2H, H]` for z
    /// and r, `w_hn` is `[H, H]` applied to `r ⊙ h`. Returns `[N, H]`.
    pub fn gru_sequence(
        &mut self,
        xp: Var,
        w_hh: Var,
        w_hn: Var,
        h0: Var,
        lengths: &[usize],
        reverse: bool,
    ) -> Result<Var> {
        let h = self.check_recurrence(xp, 3, h0, lengths)?;
        if self.shape(w_hh) != [2 * h, h] {
            return Err(Error::dim("gru w_hh", self.shape(w_hh), &[2 * h, h]));
        }
        if self.shape(w_hn) != [h, h] {
            return Err(Error::dim("gru w_hn", self.shape(w_hn), &[h, h]));
        }
        let pack = Packing::new(lengths, reverse);
        let rows = pack.rows();
        let (out, cache) = sequence::gru_forward(
            self.value(xp),
            self.value(w_hh),
            self.value(w_hn),
            self.value(h0),
            h,
            pack,
        );
        let op = Op::Gru {
            xp,
            w_hh,
            w_hn,
            h0,
            hidden: h,
            cache,
        };
        Ok(self.push(vec![rows, h], out, op, &[xp, w_hh, w_hn, h0]))
    }

    // ---- diagnostics ----------------------------------------------------

    /// Smallest distance of any recorded ReLU input from zero, or of any
    /// max-pool winner from the runner-up. Finite differences are only
    /// meaningful when this is well above the probe step.
    pub fn kink_margin(&self) -> Option<T> {
        let mut margin: Option<T> = None;
        let mut note = |m: T| {
            margin = Some(margin.map_or(m, |cur: T| cur.min(m)));
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    if self.nodes[a.0].requires_grad {
                        for &x in self.value(*a) {
                            note(x.abs());
                        }
                    }
                }
                Op::Pool {
                    input,
                    mode: PoolMode::Max,
                    segments,
                    argmax,
                } => {
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    let c = self.shape(*input)[1];
                    let src = self.value(*input);
                    // A column of clamped ReLU outputs ties at zero but carries
                    // no gradient either way; the ReLU margin already covers it.
                    let clamped = matches!(self.nodes[input.0].op, Op::Relu(_));
                    for (b, &(start, len)) in segments.iter().enumerate() {
                        for j in 0..c {
                            let best = argmax[b * c + j];
                            let top = src[best * c + j];
                            if clamped && top <= T::zero() {
                                continue;
                            }
                            for t in (start..start + len).filter(|&t| t != best) {
                                note(top - src[t * c + j]);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    // ---- reverse pass ---------------------------------------------------

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_into(loss, &mut [])
    }

    /// Like [`Graph::backward`], but the gradients of the listed leaves are
    /// added straight into the given buffers (each as long as its leaf) and
    /// left out of the returned map.
    pub fn backward_into(
        &self,
        loss: Var,
        sinks: &mut [(Var, &mut Vec<T>)],
    ) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        let mut seeded = vec![false; loss.0 + 1];
        for (v, buf) in sinks.iter() {
            let node = self
                .nodes
                .get(v.0)
                .ok_or_else(|| Error::Contract(format!("unknown node {}", v.0)))?;
            if !matches!(node.op, Op::Leaf) {
                return Err(Error::Contract(format!(
                    "gradient sink {} is not a leaf",
                    v.0
                )));
            }
            if buf.len() != node.value.as_slice().len() {
                return Err(Error::dim("gradient sink", &node.shape, &[buf.len()]));
            }
            if v.0 <= loss.0 && node.requires_grad {
                if seeded[v.0] {
                    return Err(Error::Contract(format!(
                        "gradient sink {} listed twice",
                        v.0
                    )));
                }
                seeded[v.0] = true;
            }
        }
        for (v, buf) in sinks.iter_mut() {
            if seeded.get(v.0) == Some(&true) {
                grads[v.0] = Some(std::mem::take(*buf));
            }
        }
        if seeded[loss.0] {
            let g = grads[loss.0].as_mut().expect("seeded");
            g[0] = g[0] + T::one();
        } else {
            grads[loss.0] = Some(vec![T::one()]);
        }
        let mut leaves: BTreeMap<Var, LeafGrad<T>> = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || seeded[i] {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.fault == Some(Fault::NegateBackward(node.op.kind())) {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            self.propagate(i, g, &mut grads, &mut leaves);
        }
        for (v, buf) in sinks.iter_mut() {
            if seeded.get(v.0) == Some(&true) {
                **buf = grads[v.0].take().expect("seeded buffer");
            }
        }
        Ok(Gradients { leaves })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.as_slice().len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    // Moves a gradient buffer out so several can be borrowed mutably at once.
    fn take_slot(&self, grads: &mut [Option<Vec<T>>], v: Var) -> Option<Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.as_slice().len();
        Some(grads[v.0].take().unwrap_or_else(|| vec![T::zero(); n]))
    }

    fn put_slot(grads: &mut [Option<Vec<T>>], v: Var, buf: Option<Vec<T>>) {
        if let Some(buf) = buf {
            match &mut grads[v.0] {
                Some(existing) => add_assign(existing, &buf),
                slot => *slot = Some(buf),
            }
        }
    }

    fn propagate(
        &self,
        i: usize,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        leaves: &mut BTreeMap<Var, LeafGrad<T>>,
    ) {
        let node = &self.nodes[i];
        let out = node.value.as_slice();
        match &node.op {
            Op::Leaf => {
                let entry = leaves
                    .entry(Var(i))
                    .or_insert_with(|| LeafGrad::new(g.len()));
                match &mut entry.dense {
                    Some(d) => add_assign(d, &g),
                    None => entry.dense = Some(g),
                }
            }
            &Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (self.value(a), self.value(b));
                if let Some(ga) = self.slot(grads, a) {
                    // dA = dC · Bᵀ
                    let mut tmp = vec![T::zero(); m * k];
                    gemm_nt(&g, vb, m, k, n, &mut tmp);
                    add_assign(ga, &tmp);
                }
                if let Some(gb) = self.slot(grads, b) {
                    // dB = Aᵀ · dC
                    outer_accumulate(va, &g, gb, m, n, k);
                }
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out: width,
            } => {
                let (vx, vw) = (self.value(x), self.value(w));
                if let Some(gx) = self.slot(grads, x) {
                    // dX = dY · W
                    let wt = transpose(vw, width, inp);
                    let mut tmp = vec![T::zero(); rows * inp];
                    gemm_nt(&g, &wt, rows, inp, width, &mut tmp);
                    add_assign(gx, &tmp);
                }
                if let Some(gw) = self.slot(grads, w) {
                    outer_accumulate(&g, vx, gw, rows, inp, width);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, b) {
                        for r in 0..rows {
                            add_assign(gb, &g[r * width..(r + 1) * width]);
                        }
                    }
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                if let Some(ga) = self.slot(grads, a) {
                    add_assign(ga, &g);
                }
                if let Some(gb) = self.slot(grads, b) {
                    let sign = if negate { -T::one() } else { T::one() };
                    if gb.len() == g.len() {
                        axpy(sign, &g, gb);
                    } else {
                        gb[0] = gb[0] + sign * g.iter().fold(T::zero(), |acc, &v| acc + v);
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let scalar = vb.len() != va.len();
                if let Some(ga) = self.slot(grads, a) {
                    for (j, gj) in ga.iter_mut().enumerate() {
                        let bj = if scalar { vb[0] } else { vb[j] };
                        *gj = *gj + g[j] * bj;
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    if scalar {
                        gb[0] = gb[0] + dot(&g, va);
                    } else {
                        for (j, gj) in gb.iter_mut().enumerate() {
                            *gj = *gj + g[j] * va[j];
                        }
                    }
                }
            }
            &Op::Scale(a, factor) => {
                if let Some(ga) = self.slot(grads, a) {
                    axpy(factor, &g, ga);
                }
            }
            &Op::Tanh(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((gj, &y), &u) in ga.iter_mut().zip(out).zip(&g) {
                        *gj = *gj + u * (T::one() - y * y);
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((gj, &y), &u) in ga.iter_mut().zip(out).zip(&g) {
                        *gj = *gj + u * y * (T::one() - y);
                    }
                }
            }
            &Op::Relu(a) => {
                let va = self.value(a);
                if let Some(ga) = self.slot(grads, a) {
                    for ((gj, &x), &u) in ga.iter_mut().zip(va).zip(&g) {
                        if x > T::zero() {
                            *gj = *gj + u;
                        }
                    }
                }
            }
            &Op::Interpolate { gate, from, to } => {
                let (z, a, b) = (self.value(gate), self.value(from), self.value(to));
                if let Some(gz) = self.slot(grads, gate) {
                    for j in 0..gz.len() {
                        gz[j] = gz[j] + g[j] * (b[j] - a[j]);
                    }
                }
                if let Some(ga) = self.slot(grads, from) {
                    for j in 0..ga.len() {
                        ga[j] = ga[j] + g[j] * (T::one() - z[j]);
                    }
                }
                if let Some(gb) = self.slot(grads, to) {
                    for j in 0..gb.len() {
                        gb[j] = gb[j] + g[j] * z[j];
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    let u = g[0];
                    ga.iter_mut().for_each(|v| *v = *v + u);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = &node.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if let Some(gv) = self.slot(grads, v) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_assign(&mut gv[o * chunk..(o + 1) * chunk], src);
                        }
                    }
                    offset += chunk;
                }
            }
            &Op::Slice { input, axis, start } => {
                let s = self.shape(input).to_vec();
                let len = node.shape[axis];
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                if let Some(gi) = self.slot(grads, input) {
                    for o in 0..outer {
                        let base = (o * s[axis] + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        add_assign(&mut gi[base..base + len * inner], src);
                    }
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    add_assign(ga, &g);
                }
            }
            Op::Stack(rows) => {
                let w = node.shape[1];
                for (r, &v) in rows.iter().enumerate() {
                    if let Some(gv) = self.slot(grads, v) {
                        add_assign(gv, &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::Gather { table, ids, pad } => {
                let table = *table;
                let w = node.shape[1];
                if matches!(self.nodes[table.0].op, Op::Leaf) && grads[table.0].is_none() {
                    let total = self.value(table).len();
                    let entry = leaves.entry(table).or_insert_with(|| LeafGrad::new(total));
                    entry.row_width = w;
                    for (r, &id) in ids.iter().enumerate() {
                        if Some(id) != *pad {
                            entry.rows.push((id, g[r * w..(r + 1) * w].to_vec()));
                        }
                    }
                } else if let Some(gt) = self.slot(grads, table) {
                    for (r, &id) in ids.iter().enumerate() {
                        if Some(id) != *pad {
                            add_assign(&mut gt[id * w..(id + 1) * w], &g[r * w..(r + 1) * w]);
                        }
                    }
                }
            }
            Op::Shift {
                input,
                lengths,
                delta,
            } => {
                let c = node.shape[1];
                if let Some(gi) = self.slot(grads, *input) {
                    let mut start = 0;
                    for &len in lengths {
                        for t in 0..len {
                            if let Some(from) = shifted_from(t, len, *delta) {
                                let (o, i) = ((start + t) * c, (start + from) * c);
                                add_assign(&mut gi[i..i + c], &g[o..o + c]);
                            }
                        }
                        start += len;
                    }
                }
            }
            Op::Unfold {
                input,
                window,
                lengths,
            } => {
                let d = self.shape(*input)[1];
                let span = window * d;
                if let Some(gi) = self.slot(grads, *input) {
                    let (mut start, mut r) = (0, 0);
                    for &len in lengths {
                        for t in start..start + len - window + 1 {
                            add_assign(&mut gi[t * d..t * d + span], &g[r * span..(r + 1) * span]);
                            r += 1;
                        }
                        start += len;
                    }
                }
            }
            &Op::AddRowBias { x, bias } => {
                if let Some(gx) = self.slot(grads, x) {
                    add_assign(gx, &g);
                }
                let n = node.shape[1];
                if let Some(gb) = self.slot(grads, bias) {
                    for row in g.chunks_exact(n) {
                        add_assign(gb, row);
                    }
                }
            }
            Op::Pool {
                input,
                mode,
                segments,
                argmax,
            } => {
                let c = self.shape(*input)[1];
                if let Some(gi) = self.slot(grads, *input) {
                    match mode {
                        PoolMode::Max => {
                            for (e, &t) in argmax.iter().enumerate() {
                                let j = e % c;
                                gi[t * c + j] = gi[t * c + j] + g[e];
                            }
                        }
                        PoolMode::Avg => {
                            for (b, &(start, len)) in segments.iter().enumerate() {
                                let inv = T::one() / T::from_usize(len).unwrap();
                                for t in start..start + len {
                                    axpy(inv, &g[b * c..(b + 1) * c], &mut gi[t * c..(t + 1) * c]);
                                }
                            }
                        }
                    }
                }
            }
            Op::Dropout { input, mask } => {
                if let Some(gi) = self.slot(grads, *input) {
                    for ((gj, &m), &u) in gi.iter_mut().zip(mask).zip(&g) {
                        *gj = *gj + u * m;
                    }
                }
            }
            Op::Lstm {
                xp,
                w_hh,
                h0,
                c0,
                hidden,
                cache,
            } => {
                let mut bufs = [*xp, *w_hh, *h0, *c0].map(|v| self.take_slot(grads, v));
                let [bx, bw, bh, bc] = &mut bufs;
                sequence::lstm_backward(
                    self.value(*w_hh),
                    self.value(*h0),
                    self.value(*c0),
                    *hidden,
                    out,
                    cache,
                    &g,
                    LstmGrads {
                        xp: bx.as_deref_mut(),
                        w_hh: bw.as_deref_mut(),
                        h0: bh.as_deref_mut(),
                        c0: bc.as_deref_mut(),
                    },
                );
                for (v, buf) in [*xp, *w_hh, *h0, *c0].into_iter().zip(bufs) {
                    Self::put_slot(grads, v, buf);
                }
            }
            Op::Gru {
                xp,
                w_hh,
                w_hn,
                h0,
                hidden,
                cache,
            } => {
                let mut bufs = [*xp, *w_hh, *w_hn, *h0].map(|v| self.take_slot(grads, v));
                let [bx, bw, bn, bh] = &mut bufs;
                sequence::gru_backward(
                    self.value(*w_hh),
                    self.value(*w_hn),
                    self.value(*h0),
                    *hidden,
                    out,
                    cache,
                    &g,
                    GruGrads {
                        xp: bx.as_deref_mut(),
                        w_hh: bw.as_deref_mut(),
                        w_hn: bn.as_deref_mut(),
                        h0: bh.as_deref_mut(),
                    },
                );
                for (v, buf) in [*xp, *w_hh, *w_hn, *h0].into_iter().zip(bufs) {
                    Self::put_slot(grads, v, buf);
                }
            }
            Op::BceLogits { logits, labels } => {
                let z = self.value(*logits);
                let scale = g[0] / T::from_usize(labels.len()).unwrap();
                if let Some(gl) = self.slot(grads, *logits) {
                    for ((gj, &zj), &y) in gl.iter_mut().zip(z).zip(labels) {
                        *gj = *gj + scale * (sigmoid(zj) - y);
                    }
                }
            }
        }
    }
}

// Source row of output row `t` in a block of `len` rows shifted by `delta`.
fn shifted_from(t: usize, len: usize, delta: isize) -> Option<usize> {
    let from = t as isize - delta;
    (0..len as isize).contains(&from).then_some(from as usize)
}
