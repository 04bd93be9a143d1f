//! Finite-difference self-test over every op, layer and architecture.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Vocab;
use crate::embed_io::build_matrix;
use crate::error::Result;
use crate::models::{Architecture, Model, ModelConfig};
use crate::nn::{self, CellKind, Direction, Mode, RecurrentCell};
use crate::tensor::{grad_check_many, Fault, Graph, PoolMode, Tensor, Var};

type Func = Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>;

/// One random instance: inputs and a scalar function of them.
struct Case {
    inputs: Vec<Tensor<f64>>,
    f: Func,
}

struct Component {
    name: String,
    trials: usize,
    make: Box<dyn Fn(&mut ChaCha8Rng) -> Case>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    /// Accepted trials per component.
    pub trials: usize,
    pub tolerance: f64,
    pub eps: f64,
    /// Trials whose ReLU inputs or max-pool gaps fall below this are
    /// redrawn, since finite differences are meaningless across a kink.
    /// Must exceed the widest probe, 2·`eps`.
    pub min_kink_margin: f64,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            trials: 100,
            tolerance: 1e-4,
            eps: 1e-3,
            min_kink_margin: 3e-3,
            seed: 17,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentResult {
    pub component: String,
    pub trials: usize,
    pub rejected: usize,
    pub worst_rel_error: f64,
    pub passed: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
}

// Weighted sum with fixed random weights, so every output coordinate matters.
fn scalarize(g: &mut Graph<'_, f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone().reshape(g.shape(out).to_vec())?);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn lengths(rng: &mut ChaCha8Rng, batch: usize, min: usize, max: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(min..=max)).collect()
}

fn case(inputs: Vec<Tensor<f64>>, out_len: usize, rng: &mut ChaCha8Rng, f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    let weights = uniform(rng, &[out_len], 1.0);
    Case {
        inputs,
        f: Box::new(move |g, v| {
            let out = f(g, v)?;
            scalarize(g, out, &weights)
        }),
    }
}

fn op(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Case + 'static) -> Component {
    Component {
        name: format!("op:{name}"),
        trials: 1,
        make: Box::new(make),
    }
}

fn layer(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Case + 'static) -> Component {
    Component {
        name: format!("layer:{name}"),
        trials: 1,
        make: Box::new(make),
    }
}

fn ops() -> Vec<Component> {
    vec![
        op("leaf", |r| case(vec![uniform(r, &[2, 3], 1.0)], 6, r, |_, v| Ok(v[0]))),
        op("matmul", |r| case(vec![uniform(r, &[2, 3], 1.0), uniform(r, &[3, 4], 1.0)], 8, r, |g, v| g.matmul(v[0], v[1]))),
        op("linear", |r| {
            let rows = r.random_range(1..4);
            let inputs = vec![uniform(r, &[rows, 4], 1.0), uniform(r, &[3, 4], 1.0), uniform(r, &[3], 1.0)];
            case(inputs, rows * 3, r, |g, v| g.linear(v[0], v[1], Some(v[2])))
        }),
        op("add", |r| case(vec![uniform(r, &[2, 3], 1.0), uniform(r, &[2, 3], 1.0)], 6, r, |g, v| g.add(v[0], v[1]))),
        op("sub", |r| case(vec![uniform(r, &[2, 3], 1.0), uniform(r, &[1], 1.0)], 6, r, |g, v| g.sub(v[0], v[1]))),
        op("mul", |r| {
            let scalar = r.random_bool(0.5);
            let b = if scalar { uniform(r, &[1], 1.0) } else { uniform(r, &[2, 3], 1.0) };
            case(vec![uniform(r, &[2, 3], 1.0), b], 6, r, |g, v| g.mul(v[0], v[1]))
        }),
        op("scale", |r| {
            let k = r.random_range(-2.0..2.0);
            case(vec![uniform(r, &[5], 1.0)], 5, r, move |g, v| Ok(g.scale(v[0], k)))
        }),
        op("tanh", |r| case(vec![uniform(r, &[6], 2.0)], 6, r, |g, v| Ok(g.tanh(v[0])))),
        op("sigmoid", |r| case(vec![uniform(r, &[6], 3.0)], 6, r, |g, v| Ok(g.sigmoid(v[0])))),
        op("relu", |r| case(vec![uniform(r, &[6], 1.0)], 6, r, |g, v| Ok(g.relu(v[0])))),
        op("concat", |r| {
            let axis = r.random_range(0..2);
            let b = if axis == 0 { uniform(r, &[1, 3], 1.0) } else { uniform(r, &[2, 2], 1.0) };
            let n = 6 + b.numel();
            case(vec![uniform(r, &[2, 3], 1.0), b], n, r, move |g, v| g.concat(&[v[0], v[1]], axis))
        }),
        op("slice", |r| {
            let (axis, start) = (r.random_range(0..2), r.random_range(0..2));
            let len = if axis == 0 { 3 - start } else { 4 - start - 1 };
            let n = if axis == 0 { len * 4 } else { 3 * len };
            case(vec![uniform(r, &[3, 4], 1.0)], n, r, move |g, v| g.slice(v[0], axis, start, len))
        }),
        op("reshape", |r| case(vec![uniform(r, &[2, 3], 1.0)], 6, r, |g, v| g.reshape(v[0], vec![3, 2]))),
        op("stack", |r| case(vec![uniform(r, &[3], 1.0), uniform(r, &[3], 1.0)], 9, r, |g, v| g.stack(&[v[0], v[1], v[0]]))),
        op("sum", |r| case(vec![uniform(r, &[2, 2], 1.0)], 1, r, |g, v| Ok(g.sum(v[0])))),
        op("gather", |r| {
            let ids: Vec<usize> = (0..4).map(|_| r.random_range(1..5)).collect();
            case(vec![uniform(r, &[5, 3], 1.0)], 12, r, move |g, v| g.gather(v[0], &ids, Some(0)))
        }),
        op("unfold", |r| {
            let window = r.random_range(1..4);
            let lens = lengths(r, 2, window, 5);
            let rows: usize = lens.iter().sum();
            let n: usize = lens.iter().map(|l| (l - window + 1) * window * 2).sum();
            case(vec![uniform(r, &[rows, 2], 1.0)], n, r, move |g, v| g.unfold_packed(v[0], &lens, window))
        }),
        op("add_row_bias", |r| case(vec![uniform(r, &[3, 2], 1.0), uniform(r, &[2], 1.0)], 6, r, |g, v| g.add_row_bias(v[0], v[1]))),
        op("pool", |r| {
            let mode = if r.random_bool(0.5) { PoolMode::Max } else { PoolMode::Avg };
            let lens = lengths(r, 3, 1, 4);
            let rows: usize = lens.iter().sum();
            case(vec![uniform(r, &[rows, 3], 1.0)], 9, r, move |g, v| g.pool_packed(v[0], mode, &lens))
        }),
        op("dropout", |r| {
            let mask: Vec<f64> = (0..6).map(|_| if r.random_bool(0.5) { 0.0 } else { 2.0 }).collect();
            case(vec![uniform(r, &[6], 1.0)], 6, r, move |g, v| g.masked(v[0], mask.clone()))
        }),
        op("bce_logits", |r| {
            let labels: Vec<f64> = (0..4).map(|_| f64::from(r.random_range(0..2u8))).collect();
            case(vec![uniform(r, &[4], 4.0)], 1, r, move |g, v| g.bce_mean(v[0], &labels))
        }),
        op("interpolate", |r| {
            let inputs = vec![uniform(r, &[4], 1.0), uniform(r, &[4], 1.0), uniform(r, &[4], 1.0)];
            case(inputs, 4, r, |g, v| g.interpolate(v[0], v[1], v[2]))
        }),
        op("lstm", |r| {
            let h = 3;
            let lens = lengths(r, 2, 1, 4);
            let rows: usize = lens.iter().sum();
            let reverse = r.random_bool(0.5);
            let inputs = vec![
                uniform(r, &[rows, 4 * h], 1.0),
                uniform(r, &[4 * h, h], 0.6),
                uniform(r, &[2, h], 1.0),
                uniform(r, &[2, h], 1.0),
            ];
            case(inputs, rows * 2 * h, r, move |g, v| g.lstm_sequence(v[0], v[1], v[2], v[3], &lens, reverse))
        }),
        op("gru", |r| {
            let h = 3;
            let lens = lengths(r, 2, 1, 4);
            let rows: usize = lens.iter().sum();
            let reverse = r.random_bool(0.5);
            let inputs = vec![
                uniform(r, &[rows, 3 * h], 1.0),
                uniform(r, &[2 * h, h], 0.6),
                uniform(r, &[h, h], 0.6),
                uniform(r, &[2, h], 1.0),
            ];
            case(inputs, rows * h, r, move |g, v| g.gru_sequence(v[0], v[1], v[2], v[3], &lens, reverse))
        }),
        op("shift", |r| {
            let delta = [-2isize, -1, 1, 2][r.random_range(0..4)];
            let lens = lengths(r, 3, 1, 4);
            let rows: usize = lens.iter().sum();
            case(vec![uniform(r, &[rows, 2], 1.0)], rows * 2, r, move |g, v| g.shift_packed(v[0], &lens, delta))
        }),
    ]
}

fn cell_inputs(r: &mut ChaCha8Rng, kind: CellKind, input: usize, h: usize) -> Vec<Tensor<f64>> {
    let gates = kind.gates();
    let mut v = vec![uniform(r, &[gates * h, input], 0.7)];
    match kind {
        CellKind::Lstm => v.push(uniform(r, &[4 * h, h], 0.7)),
        CellKind::Gru => {
            v.push(uniform(r, &[2 * h, h], 0.7));
            v.push(uniform(r, &[h, h], 0.7));
        }
    }
    v.push(uniform(r, &[gates * h], 0.5));
    v
}

fn make_cell(g: &Graph<'_, f64>, kind: CellKind, v: &[Var]) -> Result<RecurrentCell> {
    match kind {
        CellKind::Lstm => RecurrentCell::lstm(g, v[0], v[1], v[2]),
        CellKind::Gru => RecurrentCell::gru(g, v[0], v[1], v[2], v[3]),
    }
}

fn layers() -> Vec<Component> {
    let mut out = vec![
        layer("embed", |r| {
            let ids: Vec<usize> = (0..5).map(|_| r.random_range(1..6)).collect();
            case(vec![uniform(r, &[6, 3], 1.0)], 15, r, move |g, v| nn::embed(g, v[0], &ids, 0))
        }),
        layer("conv1d_valid", |r| {
            let k = r.random_range(1..4);
            let len = r.random_range(k..7);
            let inputs = vec![uniform(r, &[len, 3], 1.0), uniform(r, &[k, 3, 2], 0.6), uniform(r, &[2], 0.3)];
            case(inputs, (len - k + 1) * 2, r, |g, v| nn::conv1d_valid(g, v[0], v[1], v[2]))
        }),
        layer("pool_time", |r| {
            let mode = if r.random_bool(0.5) { PoolMode::Max } else { PoolMode::Avg };
            let valid = r.random_range(1..6);
            case(vec![uniform(r, &[6, 3], 1.0)], 3, r, move |g, v| nn::pool_time(g, v[0], mode, valid))
        }),
        layer("linear", |r| {
            let inputs = vec![uniform(r, &[3, 4], 1.0), uniform(r, &[3], 1.0), uniform(r, &[2, 4], 1.0)];
            case(inputs, 6, r, |g, v| nn::linear(g, v[0], v[1], v[2]))
        }),
        layer("dropout", |r| {
            let seed = r.random();
            case(vec![uniform(r, &[8], 1.0)], 8, r, move |g, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                nn::dropout(g, v[0], 0.5, Mode::Train, &mut rng)
            })
        }),
        layer("bce_loss", |r| {
            let label = r.random_range(0..2u8);
            case(vec![uniform(r, &[1], 5.0)], 1, r, move |g, v| nn::bce_loss(g, v[0], label))
        }),
    ];
    for kind in [CellKind::Lstm, CellKind::Gru] {
        let name = match kind {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        };
        out.push(layer(&format!("{name}_step"), move |r| {
            let (input, h) = (3, 3);
            let mut inputs = cell_inputs(r, kind, input, h);
            let n = inputs.len();
            inputs.push(uniform(r, &[input], 1.0));
            inputs.push(uniform(r, &[h], 1.0));
            if kind == CellKind::Lstm {
                inputs.push(uniform(r, &[h], 1.0));
            }
            case(inputs, h, r, move |g, v| {
                let cell = make_cell(g, kind, &v[..n])?;
                // three unrolled steps from the same input
                let (mut hs, mut cs) = (v[n + 1], v.get(n + 2).copied());
                for _ in 0..3 {
                    match kind {
                        CellKind::Lstm => {
                            let (h2, c2) = nn::lstm_step(g, &cell, v[n], hs, cs.unwrap())?;
                            hs = h2;
                            cs = Some(c2);
                        }
                        CellKind::Gru => hs = nn::gru_step(g, &cell, v[n], hs)?,
                    }
                }
                Ok(hs)
            })
        }));
        out.push(layer(&format!("run_rnn_{name}"), move |r| {
            let (input, h, len) = (3, 3, 5);
            let mut inputs = cell_inputs(r, kind, input, h);
            let n = inputs.len();
            inputs.push(uniform(r, &[len, input], 1.0));
            let valid = r.random_range(1..=len);
            let dir = if r.random_bool(0.5) { Direction::Forward } else { Direction::Backward };
            case(inputs, len * h, r, move |g, v| {
                let cell = make_cell(g, kind, &v[..n])?;
                nn::run_rnn(g, &cell, v[n], dir, valid)
            })
        }));
        out.push(layer(&format!("bidirectional_{name}"), move |r| {
            let (input, h) = (2, 3);
            let mut inputs = cell_inputs(r, kind, input, h);
            inputs.extend(cell_inputs(r, kind, input, h));
            let n = inputs.len() / 2;
            let lens = lengths(r, 2, 1, 4);
            let rows: usize = lens.iter().sum();
            inputs.push(uniform(r, &[rows, input], 1.0));
            case(inputs, rows * 2 * h, r, move |g, v| {
                let f = make_cell(g, kind, &v[..n])?;
                let b = make_cell(g, kind, &v[n..2 * n])?;
                nn::bidirectional_packed(g, &f, &b, v[2 * n], &lens)
            })
        }));
    }
    out
}

fn model_variants() -> Vec<(String, ModelConfig)> {
    let base = ModelConfig {
        embedding_dim: 4,
        kernel_heights: vec![2, 3],
        out_channels: 3,
        hidden_size: 3,
        fc_units: 3,
        dropout_p: 0.0,
        fine_tune: true,
        max_len: Some(12),
        ..Default::default()
    };
    let with = |arch, f: &dyn Fn(&mut ModelConfig)| {
        let mut c = ModelConfig { architecture: arch, ..base.clone() };
        f(&mut c);
        c
    };
    vec![
        ("model:cnn".into(), with(Architecture::Cnn, &|_| {})),
        ("model:cnn_avg".into(), with(Architecture::Cnn, &|c| c.pooling = PoolMode::Avg)),
        ("model:bilstm".into(), with(Architecture::BiLstm, &|_| {})),
        ("model:lstm".into(), with(Architecture::BiLstm, &|c| c.bidirectional = false)),
        ("model:bigru".into(), with(Architecture::BiGru, &|_| {})),
        ("model:crnn".into(), with(Architecture::Crnn, &|_| {})),
        ("model:crnn_lstm".into(), with(Architecture::Crnn, &|c| c.crnn_cell = CellKind::Lstm)),
        ("model:crnn_unidirectional".into(), with(Architecture::Crnn, &|c| c.bidirectional = false)),
    ]
}

fn models(trials: usize) -> Vec<Component> {
    model_variants()
        .into_iter()
        .map(|(name, cfg)| Component {
            name,
            trials,
            make: Box::new(move |r: &mut ChaCha8Rng| {
                let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
                tokens.extend((0..6).map(|i| format!("w{i}")));
                let vocab = Vocab::from_tokens(tokens).expect("vocab");
                let seed: u64 = r.random();
                let emb = build_matrix(&vocab, None, cfg.embedding_dim, seed).expect("matrix");
                let model = Model::<f64>::build(ModelConfig { seed, ..cfg.clone() }, vocab.clone(), &emb).expect("model");
                let len = [cfg.min_length().max(3), 7, 12][r.random_range(0..3)];
                let ids: Vec<usize> = (0..len).map(|_| r.random_range(1..vocab.len())).collect();
                let label = f64::from(r.random_range(0..2u8));
                let inputs = model.params().iter().map(|p| p.value.clone()).collect();
                Case {
                    inputs,
                    f: Box::new(move |g, v| {
                        let mut unused = ChaCha8Rng::seed_from_u64(0);
                        let o = model.forward(g, v, &[&ids], Mode::Eval, &mut unused)?;
                        g.bce_mean(o.logits, &[label])
                    }),
                }
            }),
        })
        .collect()
}

fn run_component(c: &Component, opts: &SuiteOptions, index: u64) -> Result<ComponentResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(index);
    let wanted = c.trials;
    let (mut accepted, mut rejected, mut worst) = (0, 0, 0.0f64);
    while accepted < wanted && rejected < 20 * wanted {
        let case = (c.make)(&mut rng);
        let check = grad_check_many(&case.f, &case.inputs, opts.eps, opts.fault)?;
        if check.kink_margin.is_some_and(|m| m < opts.min_kink_margin) {
            rejected += 1;
            continue;
        }
        accepted += 1;
        worst = worst.max(check.max_rel_error);
    }
    Ok(ComponentResult {
        component: c.name.clone(),
        trials: accepted,
        rejected,
        worst_rel_error: worst,
        passed: accepted == wanted && worst < opts.tolerance,
    })
}

/// Component names in suite order.
pub fn components() -> Vec<String> {
    all(&SuiteOptions::default()).into_iter().map(|c| c.name).collect()
}

fn all(opts: &SuiteOptions) -> Vec<Component> {
    let mut list = ops();
    list.extend(layers());
    list.extend(models(0));
    for c in &mut list {
        c.trials = opts.trials;
    }
    list
}

/// Runs every component; `progress` sees each result as it completes.
pub fn run_suite(opts: &SuiteOptions, mut progress: impl FnMut(&ComponentResult)) -> Result<Vec<ComponentResult>> {
    let start = Instant::now();
    let mut out = Vec::new();
    for (i, c) in all(opts).iter().enumerate() {
        let r = run_component(c, opts, i as u64)?;
        progress(&r);
        out.push(r);
    }
    log::info!("gradient check finished in {:.1}s", start.elapsed().as_secs_f64());
    Ok(out)
}


#[cfg(test)]
mod full {
    use super::*;

    #[test]
    fn default_suite_passes_within_a_minute() {
        let start = Instant::now();
        let results = run_suite(&SuiteOptions::default(), |r| {
            println!("{} trials={} rejected={} worst={:.2e}", r.component, r.trials, r.rejected, r.worst_rel_error)
        })
        .unwrap();
        let secs = start.elapsed().as_secs_f64();
        assert!(results.iter().all(|r| r.passed));
        assert!(secs < 60.0, "{secs:.1}s");
    }
}
