use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Architecture, ModelConfig};
use crate::data::{encode, Encoded, Vocab, PAD};
use crate::embed_io::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::nn::{self, init, CellKind, Direction, Mode, RecurrentCell};
use crate::tensor::{Graph, PoolMode, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct CellSlots {
    kind: CellKind,
    w_ih: usize,
    w_hh: usize,
    w_hn: Option<usize>,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Cnn {
        convs: Vec<(usize, usize, usize)>,
    },
    Rnn {
        forward: CellSlots,
        backward: Option<CellSlots>,
        fc: (usize, usize),
    },
    Crnn {
        forward: CellSlots,
        backward: Option<CellSlots>,
        proj: (usize, usize),
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    body: Body,
    out: (usize, usize),
}

/// Handles of the nodes a forward pass exposes.
#[derive(Debug, Clone)]
pub struct Output {
    /// `[B, 1]`
    pub logits: Var,
    /// `[B, F]` pooled features before dropout and the output layer.
    pub pooled: Var,
    /// The pooling nodes that make up `pooled`, one per CNN kernel.
    pub pools: Vec<Var>,
    /// CRNN only: `[N, 2H + D]` per-token `[left context; embedding; right context]`.
    pub composite: Option<Var>,
}

/// A sentence classifier: parameters, the vocabulary they index, and the
/// configuration that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f64> {
    config: ModelConfig,
    vocab: Vocab,
    params: Vec<Param<T>>,
    layout: Layout,
}

struct Builder<'r, T: Real> {
    params: Vec<Param<T>>,
    rng: &'r mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn push(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Param {
            name,
            value: value.requiring_grad(),
        });
        self.params.len() - 1
    }

    fn weight(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let t = init::uniform_fan_in(self.rng, shape, fan_in);
        self.push(name, t)
    }

    fn bias(&mut self, name: String, n: usize) -> usize {
        self.push(name, Tensor::zeros(vec![n]))
    }

    fn cell(&mut self, prefix: &str, kind: CellKind, input: usize, h: usize) -> CellSlots {
        let gates = kind.gates();
        let w_ih = self.weight(format!("{prefix}.w_ih"), vec![gates * h, input], input);
        let hh_rows = if kind == CellKind::Lstm { 4 * h } else { 2 * h };
        let w_hh = self.weight(format!("{prefix}.w_hh"), vec![hh_rows, h], h);
        let w_hn = (kind == CellKind::Gru).then(|| self.weight(format!("{prefix}.w_hn"), vec![h, h], h));
        let bias = self.bias(format!("{prefix}.bias"), gates * h);
        if kind == CellKind::Lstm {
            // forget gate starts open
            self.params[bias].value.data_mut()[h..2 * h].fill(T::one());
        }
        CellSlots {
            kind,
            w_ih,
            w_hh,
            w_hn,
            bias,
        }
    }

    fn cells(&mut self, kind: CellKind, input: usize, h: usize, bidirectional: bool) -> (CellSlots, Option<CellSlots>) {
        let f = self.cell("forward", kind, input, h);
        let b = bidirectional.then(|| self.cell("backward", kind, input, h));
        (f, b)
    }

    fn dense(&mut self, prefix: &str, input: usize, output: usize) -> (usize, usize) {
        let w = self.weight(format!("{prefix}.weight"), vec![output, input], input);
        let b = self.bias(format!("{prefix}.bias"), output);
        (w, b)
    }
}

impl<T: Real> Model<T> {
    /// Deterministic in `config.seed`. `config.max_len` must be resolved.
    pub fn build(config: ModelConfig, vocab: Vocab, embedding: &EmbeddingMatrix) -> Result<Self> {
        config.validate()?;
        if config.max_len.is_none() {
            return Err(Error::Config("max_len must be resolved before building a model".into()));
        }
        let d = config.embedding_dim;
        if embedding.dim != d {
            return Err(Error::Config(format!("embedding has D={}, model expects D={d}", embedding.dim)));
        }
        if embedding.values.shape() != [vocab.len(), d] {
            return Err(Error::Config(format!(
                "embedding has {} rows for a vocabulary of {}",
                embedding.values.shape()[0],
                vocab.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder {
            params: Vec::new(),
            rng: &mut rng,
        };
        let mut table: Tensor<T> = embedding.values.cast();
        table.set_requires_grad(config.fine_tune);
        b.params.push(Param {
            name: "embedding".into(),
            value: table,
        });
        let (h, f) = (config.hidden_size, config.fc_units);
        let (body, features) = match config.architecture {
            Architecture::Cnn => {
                let c = config.out_channels;
                let convs = config
                    .kernel_heights
                    .iter()
                    .map(|&k| {
                        let w = b.weight(format!("conv{k}.weight"), vec![k, d, c], k * d);
                        let bias = b.bias(format!("conv{k}.bias"), c);
                        (k, w, bias)
                    })
                    .collect();
                (Body::Cnn { convs }, config.kernel_heights.len() * c)
            }
            Architecture::BiLstm | Architecture::BiGru => {
                let (forward, backward) = b.cells(config.cell(), d, h, config.bidirectional);
                let fc = b.dense("fc", config.directions() * h, f);
                (Body::Rnn { forward, backward, fc }, f)
            }
            Architecture::Crnn => {
                let (forward, backward) = b.cells(config.cell(), d, h, config.bidirectional);
                let proj = b.dense("proj", config.directions() * h + d, f);
                (Body::Crnn { forward, backward, proj }, f)
            }
        };
        let out = b.dense("out", features, 1);
        let params = b.params;
        Ok(Model {
            config,
            vocab,
            params,
            layout: Layout { body, out },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len.expect("resolved at build")
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn embedding(&self) -> &Tensor<T> {
        &self.params[0].value
    }

    /// Indices of the parameters the optimizer updates; the embedding is
    /// among them only when fine-tuning.
    pub fn trainable(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.params[i].value.requires_grad()).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|&i| self.params[i].value.numel()).sum()
    }

    /// Encodes already tokenized text with this model's vocabulary.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Encoded> {
        encode(tokens, &self.vocab, self.max_len())
    }

    /// Records every parameter as a leaf, in parameter order.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(&p.value)).collect()
    }

    /// Forward pass over a batch of sentences given as their valid token
    /// ids. Sentences share no computation that depends on each other, so
    /// each logit is the same bits it would be in a batch of one.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        vars: &[Var],
        batch: &[&[usize]],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Output> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!("{} bound parameters, model has {}", vars.len(), self.params.len())));
        }
        if batch.is_empty() {
            return Err(Error::EmptySequence("empty batch"));
        }
        if batch.iter().any(|s| s.is_empty()) {
            return Err(Error::EmptySequence("sentence without tokens"));
        }
        let floor = self.config.min_length();
        let lengths: Vec<usize> = batch.iter().map(|s| s.len().max(floor)).collect();
        let mut ids = Vec::with_capacity(lengths.iter().sum());
        for (s, &len) in batch.iter().zip(&lengths) {
            ids.extend_from_slice(s);
            ids.resize(ids.len() + len - s.len(), PAD);
        }
        let x = nn::embed(g, vars[0], &ids, PAD)?;
        let pool = self.config.pooling;
        let v = |i: usize| vars[i];
        let mut pools = Vec::new();
        let mut composite = None;
        let (pooled, hidden_head) = match &self.layout.body {
            Body::Cnn { convs } => {
                let mut maps = Vec::with_capacity(convs.len());
                for &(k, w, b) in convs {
                    let windows = g.unfold_packed(x, &lengths, k)?;
                    let (d, c) = (self.config.embedding_dim, self.config.out_channels);
                    let kernel = g.reshape(v(w), vec![k * d, c])?;
                    let pre = g.matmul(windows, kernel)?;
                    let pre = g.add_row_bias(pre, v(b))?;
                    let act = g.relu(pre);
                    let positions: Vec<usize> = lengths.iter().map(|l| l - k + 1).collect();
                    maps.push(g.pool_packed(act, pool, &positions)?);
                }
                let pooled = if maps.len() == 1 { maps[0] } else { g.concat(&maps, 1)? };
                pools = maps;
                (pooled, None)
            }
            Body::Rnn { forward, backward, fc } => {
                let states = self.recurrent(g, vars, x, &lengths, forward, backward.as_ref(), false)?;
                let p = g.pool_packed(states, pool, &lengths)?;
                pools.push(p);
                (p, Some(*fc))
            }
            Body::Crnn { forward, backward, proj } => {
                let c = self.recurrent(g, vars, x, &lengths, forward, backward.as_ref(), true)?;
                composite = Some(c);
                let y = g.linear(c, v(proj.0), Some(v(proj.1)))?;
                let y = g.tanh(y);
                let p = g.pool_packed(y, pool, &lengths)?;
                pools.push(p);
                (p, None)
            }
        };
        let mut h = if self.config.uses_dropout() {
            nn::dropout(g, pooled, self.config.dropout_p, mode, rng)?
        } else {
            pooled
        };
        if let Some((w, b)) = hidden_head {
            h = g.linear(h, v(w), Some(v(b)))?;
            h = g.relu(h);
        }
        let logits = g.linear(h, v(self.layout.out.0), Some(v(self.layout.out.1)))?;
        Ok(Output {
            logits,
            pooled,
            pools,
            composite,
        })
    }

    fn cell(&self, g: &Graph<'_, T>, vars: &[Var], s: &CellSlots) -> Result<RecurrentCell> {
        match s.kind {
            CellKind::Lstm => RecurrentCell::lstm(g, vars[s.w_ih], vars[s.w_hh], vars[s.bias]),
            CellKind::Gru => RecurrentCell::gru(g, vars[s.w_ih], vars[s.w_hh], vars[s.w_hn.unwrap()], vars[s.bias]),
        }
    }

    // Bidirectional states `[h→ ; h←]`, or with `context` the composite
    // `[h→(t−1) ; x(t) ; h←(t+1)]` whose outer blocks are zero at the ends.
    #[allow(clippy::too_many_arguments)]
    fn recurrent(
        &self,
        g: &mut Graph<'_, T>,
        vars: &[Var],
        x: Var,
        lengths: &[usize],
        forward: &CellSlots,
        backward: Option<&CellSlots>,
        context: bool,
    ) -> Result<Var> {
        let fc = self.cell(g, vars, forward)?;
        let mut f = nn::run_rnn_packed(g, &fc, x, lengths, Direction::Forward)?;
        if context {
            f = g.shift_packed(f, lengths, 1)?;
        }
        let mut parts = vec![f];
        if context {
            parts.push(x);
        }
        if let Some(bs) = backward {
            let bc = self.cell(g, vars, bs)?;
            let mut b = nn::run_rnn_packed(g, &bc, x, lengths, Direction::Backward)?;
            if context {
                b = g.shift_packed(b, lengths, -1)?;
            }
            parts.push(b);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat(&parts, 1)
        }
    }

    /// Logits in evaluation mode, batched internally.
    pub fn logits(&self, sentences: &[&[usize]]) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(sentences.len());
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        for chunk in sentences.chunks(64) {
            let mut g = Graph::new();
            let vars = self.bind(&mut g);
            let o = self.forward(&mut g, &vars, chunk, Mode::Eval, &mut unused)?;
            out.extend_from_slice(g.value(o.logits));
        }
        Ok(out)
    }

    /// Logits of fixed-size encoded sentences. Only the first
    /// `valid_length` ids of each are read.
    pub fn logits_encoded(&self, batch: &[Encoded]) -> Result<Vec<T>> {
        let valid: Vec<&[usize]> = batch.iter().map(Encoded::valid).collect();
        self.logits(&valid)
    }

    /// `p(metaphor | sentence)` for each sentence.
    pub fn predict_proba(&self, sentences: &[&[usize]]) -> Result<Vec<f64>> {
        Ok(self
            .logits(sentences)?
            .into_iter()
            .map(|z| crate::tensor::kernels::sigmoid(z).as_f64())
            .collect())
    }

    /// For each pooled feature, the token position that won the max-pool
    /// (for the CNN, the first token of the winning window).
    pub fn salient_positions(&self, ids: &[usize]) -> Result<Vec<usize>> {
        if self.config.pooling != PoolMode::Max {
            return Err(Error::Evaluation("salient positions need max pooling".into()));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let o = self.forward(&mut g, &vars, &[ids], Mode::Eval, &mut unused)?;
        let positions: Vec<usize> = o
            .pools
            .iter()
            .flat_map(|&p| g.pool_argmax(p).unwrap_or_default().iter().copied())
            .collect();
        debug_assert_eq!(positions.len(), g.value(o.pooled).len());
        Ok(positions)
    }

    /// Rebuilds the model from stored parameter values, checking that the
    /// configuration would produce the same names and shapes.
    pub(crate) fn with_params(config: ModelConfig, vocab: Vocab, stored: Vec<Param<T>>) -> Result<Self> {
        let d = config.embedding_dim;
        let blank = EmbeddingMatrix {
            values: Tensor::zeros(vec![vocab.len(), d.max(1)]),
            dim: d,
            coverage: 0.0,
        };
        let mut model = Model::<T>::build(config, vocab, &blank)?;
        if stored.len() != model.params.len() {
            return Err(Error::Compatibility(format!(
                "checkpoint holds {} parameters, configuration needs {}",
                stored.len(),
                model.params.len()
            )));
        }
        for (slot, p) in model.params.iter_mut().zip(stored) {
            if slot.name != p.name || slot.value.shape() != p.value.shape() {
                return Err(Error::Compatibility(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    slot.name,
                    slot.value.shape()
                )));
            }
            let flag = slot.value.requires_grad();
            slot.value = p.value;
            slot.value.set_requires_grad(flag);
        }
        Ok(model)
    }
}
